//! Projects scene points into the projector and recovers their depth from
//! the camera pixel and projector column alone.

use nalgebra::Vector3;
use neural_sl::geometry::{triangulate, Rig};

fn main() -> neural_sl::Result<()> {
    let rig = Rig::desk();
    let points = [
        Vector3::new(0.0, 0.0, 0.65),
        Vector3::new(0.05, -0.03, 0.75),
        Vector3::new(-0.12, 0.08, 0.9),
        Vector3::new(0.2, 0.1, 0.95),
    ];
    println!("{:>28} {:>10} {:>10} {:>12}", "point", "column", "depth", "error");
    for p in points {
        let cam = rig.camera.project(&p)?;
        let proj = rig.projector.project(&p)?;
        let z = triangulate(&rig.camera, cam, &rig.projector, proj[0])?;
        let truth = rig.camera.depth_of(&p);
        println!(
            "{:>28} {:>10.3} {:>10.5} {:>12.2e}",
            format!("({:.2}, {:.2}, {:.2})", p.x, p.y, p.z),
            proj[0],
            z,
            (z - truth).abs()
        );
    }
    println!("\ncalibration file:\n{}", rig.to_toml());
    Ok(())
}
