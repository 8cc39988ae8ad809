//! Builds the desk network and shows that its initial zero level set
//! matches the configured init shape.

use neural_sl::experiment::{Experiment, ExperimentConfig};
use neural_sl::geometry::Bounds;
use neural_sl::depth::extract_depth;
use neural_sl::sdf_net::{InitShape, NetConfig, SdfNetwork, SceneBox};

fn main() -> neural_sl::Result<()> {
    let exp = Experiment::new(ExperimentConfig::desk())?;
    let net = exp.new_network()?;
    println!(
        "params {}  MACs/point {}  1/s {:.3}",
        net.num_params(),
        net.macs_per_point(),
        net.inv_s()
    );

    let init = net.config.init;
    let probes = [[0.0, 0.0, 0.75], [0.1, 0.0, 0.6], [0.0, -0.2, 0.95], [0.25, 0.25, 1.0]];
    for p in probes {
        let target = init.target(net.scene_box.normalize(p));
        println!("f({p:?}) = {:+.4}  init target {target:+.4}", net.sdf_world(p));
    }

    // An untrained network already gives every pixel one surface crossing.
    let depth = extract_depth(&net, &exp.rig.camera, Bounds::default(), 64)?;
    println!("pixels with a crossing: {}/{}", depth.valid_count(), depth.depth.len());

    // Object-centric init for comparison: rays from the camera only hit a small ball.
    let cfg = NetConfig {
        init: InitShape::Sphere { radius: 0.5 },
        ..NetConfig::desk()
    };
    let ball = SdfNetwork::new(cfg, SceneBox::desk(), 0)?;
    let depth = extract_depth(&ball, &exp.rig.camera, Bounds::default(), 64)?;
    println!("sphere init crossings: {}/{}", depth.valid_count(), depth.depth.len());
    Ok(())
}
