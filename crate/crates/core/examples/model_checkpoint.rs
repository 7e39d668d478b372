//! Build the BiLSTM separator, run it on random input and round-trip a checkpoint.

use ndarray::Array3;
use nbss::model::{forward, ModelParams, ModelShape};

fn main() -> nbss::Result<()> {
    let shape = ModelShape::full(8, 2);
    let params = ModelParams::<f32>::init(shape, 0);
    println!("{:?}: {} parameters", shape, params.data.len());

    let x = Array3::from_shape_fn((4, 16, 100), |(b, c, t)| ((b * 31 + c * 7 + t) as f32 * 0.37).sin());
    let (y, _) = forward(&params, x.view())?;
    println!("input {:?} -> output {:?}", x.dim(), y.dim());

    let path = std::env::temp_dir().join("nbss_example.ckpt");
    params.save(&path)?;
    let back = ModelParams::<f32>::load(&path)?;
    println!("checkpoint {} bytes, identical: {}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), back == params);
    Ok(())
}
