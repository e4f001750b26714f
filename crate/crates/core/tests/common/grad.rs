//! Finite-difference checks of every composite layer, shared by the layer
//! tests and the acceptance run. Each returns the worst relative error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semist::acoustic::{contrastive_loss, ConvSpec, Encoder, EncoderConfig};
use semist::nn::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear};
use semist::numerics::{ParamStore, Tape, Tensor, Var};

use super::gradcheck;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Projects onto fixed random weights so every output coordinate matters.
fn weighted_sum(t: &mut Tape<'_, f64>, y: Var, w: &Tensor<f64>) -> Var {
    let w = t.constant(w.clone());
    let p = t.mul(y, w);
    t.sum(p)
}

pub fn linear() -> f64 {
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "l", 5, 3, &mut r);
    // nonzero bias so its gradient is exercised away from zero
    *store.value_mut(lin.b) = Tensor::randn(&[3], 0.5, &mut r);
    let x = Tensor::<f64>::randn(&[4, 5], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
    gradcheck(&mut store, H, |t| {
        let xv = t.constant(x.clone());
        let y = lin.forward(t, xv);
        weighted_sum(t, y, &w)
    })
}

pub fn feed_forward() -> f64 {
    let mut r = rng(2);
    let mut store = ParamStore::<f64>::new();
    let ff = FeedForward::new(&mut store, "ff", 4, 8, &mut r);
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    gradcheck(&mut store, H, |t| {
        let xv = t.constant(x.clone());
        let y = ff.forward(t, xv);
        weighted_sum(t, y, &w)
    })
}

pub fn norm_and_attention() -> f64 {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "ln", 4);
    let att = Attention::new(&mut store, "att", 4, 6, 2, &mut r);
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let mem = Tensor::<f64>::randn(&[5, 6], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    gradcheck(&mut store, H, |t| {
        let xv = t.constant(x.clone());
        let mv = t.constant(mem.clone());
        let h = ln.forward(t, xv);
        let y = att.forward(t, h, mv, false);
        weighted_sum(t, y, &w)
    })
}

pub fn encoder_layer(causal: bool) -> f64 {
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut store, "enc", 4, 8, 2, &mut r);
    let x = Tensor::<f64>::randn(&[4, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[4, 4], 1.0, &mut r);
    gradcheck(&mut store, H, |t| {
        let xv = t.constant(x.clone());
        let y = layer.forward(t, xv, causal);
        weighted_sum(t, y, &w)
    })
}

pub fn decoder_layer() -> f64 {
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let layer = DecoderLayer::new(&mut store, "dec", 4, 8, 2, &mut r);
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let mem = Tensor::<f64>::randn(&[5, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    gradcheck(&mut store, H, |t| {
        let xv = t.constant(x.clone());
        let mv = t.constant(mem.clone());
        let y = layer.forward(t, xv, mv);
        weighted_sum(t, y, &w)
    })
}

pub fn encoder_stack() -> f64 {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let cfg = EncoderConfig {
        input_dim: 2,
        conv: ConvSpec::new(&[3, 2], &[2, 1], 3).unwrap(),
        dim: 4,
        layers: 1,
        heads: 2,
        inner: 6,
        layer_drop: 0.0,
        max_positions: 16,
    };
    let enc = Encoder::new(&mut store, &cfg, &mut r).unwrap();
    let frames = Tensor::<f64>::randn(&[9, 2], 1.0, &mut r);
    let t_out = enc.output_len(9).unwrap();
    let mask: Vec<bool> = (0..t_out).map(|i| i == 1).collect();
    let w = Tensor::<f64>::randn(&[t_out, 4], 1.0, &mut r);
    gradcheck(&mut store, H, |t| {
        let f = t.constant(frames.clone());
        let out = enc.forward(t, f, Some(&mask), None).unwrap();
        weighted_sum(t, out.context, &w)
    })
}

pub fn contrastive(with_exclusions: bool) -> f64 {
    let mut r = rng(7);
    let mut store = ParamStore::<f64>::new();
    // rows of both small and large norm, either side of the norm floor
    let mut p = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    for x in p.data_mut()[..4].iter_mut() {
        *x *= 0.1;
    }
    for x in p.data_mut()[4..8].iter_mut() {
        *x *= 3.0;
    }
    let pred = store.add("pred", p);
    let cands = Tensor::<f64>::randn(&[3 * 4, 4], 1.0, &mut r);
    let excluded: Vec<bool> = (0..12).map(|i| i == 2 || i == 7).collect();
    let ex = with_exclusions.then_some(excluded.as_slice());
    gradcheck(&mut store, H, |t| {
        let pv = t.param(pred);
        contrastive_loss(t, pv, &cands, 4, 0.1, ex).unwrap()
    })
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("linear", linear()),
        ("feed-forward", feed_forward()),
        ("layer norm + attention", norm_and_attention()),
        ("encoder layer", encoder_layer(false)),
        ("causal encoder layer", encoder_layer(true)),
        ("decoder layer", decoder_layer()),
        ("encoder stack", encoder_stack()),
        ("contrastive loss", contrastive(false)),
        ("contrastive loss with exclusions", contrastive(true)),
    ]
}
