use diffad_core::numerics::{Tape, Tensor};
use diffad_core::unet::{UNetConfig, UNetModel};
use std::time::Instant;
fn main() {
    for base in [32usize, 16, 8] {
        let cfg = UNetConfig {
            base_channels: base,
            groups: if base >= 16 { 8 } else { 4 },
            time_embed_dim: base * 4,
            ..Default::default()
        };
        let m = UNetModel::new(cfg, 1).unwrap();
        let n = 32;
        let x = Tensor::from_fn(&[n, 1, 28, 28], |i| ((i as f32) * 0.1).sin());
        let t: Vec<usize> = (0..n).map(|i| 1 + i * 7).collect();
        let st = Instant::now();
        let _ = m.predict(&x, &t).unwrap();
        let f = st.elapsed().as_secs_f64();
        let st = Instant::now();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = m.forward(&mut tape, &p, xv, &t).unwrap();
        let l = tape.mse(y, &x).unwrap();
        let _g = tape.backward(l).unwrap();
        let fb = st.elapsed().as_secs_f64();
        println!(
            "base {base}: params {} fwd {:.2} ms/patch, train {:.2} ms/patch",
            m.parameter_count(),
            f * 1e3 / n as f64,
            fb * 1e3 / n as f64
        );
    }
}
