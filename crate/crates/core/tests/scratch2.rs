use inrtomo::io::{read_image, read_sinogram};
use inrtomo::projector::forward_project;
use std::path::Path;

#[test]
#[ignore]
fn residual_probe() {
    let dir = std::env::var("PROBE_DIR").unwrap();
    let recon = read_image(Path::new(&format!("{dir}/recon.raw"))).unwrap();
    let truth = read_image(Path::new(&format!("{dir}/truth.raw"))).unwrap();
    let sino = read_sinogram(Path::new(&std::env::var("PROBE_SINO").unwrap())).unwrap();
    for (name, img) in [("recon", &recon), ("truth", &truth)] {
        let p = forward_project(img, &sino.geometry).unwrap();
        let mut ss = 0.0;
        for (a, b) in p.values.iter().zip(&sino.values) {
            ss += (a - b) * (a - b);
        }
        let ynorm: f64 = sino.values.iter().map(|v| v * v).sum();
        println!(
            "{name}: ||P x - y|| = {:.4e} (rel {:.4e})",
            ss.sqrt(),
            (ss / ynorm).sqrt()
        );
    }
}
