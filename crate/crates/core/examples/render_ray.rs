//! Renders one camera ray through the untrained network with both weight
//! functions and prints the per-sample weights.

use neural_sl::experiment::{Experiment, ExperimentConfig};
use neural_sl::geometry::Bounds;
use neural_sl::render::{render_ray, stratified, WeightMode};

fn main() -> neural_sl::Result<()> {
    let exp = Experiment::new(ExperimentConfig::desk())?;
    let net = exp.new_network()?;
    let patterns = exp.random_patterns(3)?;
    let bounds = Bounds::default();
    let ray = exp.rig.camera.pixel_to_ray([160.0, 128.0], bounds)?;
    let t = stratified(bounds, 32, None);

    for mode in [WeightMode::Eq3, WeightMode::Alpha] {
        let out = render_ray(&net, &ray, &t, mode, &patterns, &exp.rig.projector, 0.1, 0.8);
        let peak = out.weights.iter().cloned().enumerate().fold((0, 0.0), |m, (i, w)| if w > m.1 { (i, w) } else { m });
        println!("{mode:?}: sum of weights {:.6}, peak {:.4} at t = {:.4}", out.weight_sum, peak.1, out.t[peak.0]);
        if let Some(s) = out.surface {
            println!("  expected surface z = {:.4}", s.z);
        }
        println!("  rendered {:?}", out.rendered.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }
    Ok(())
}
