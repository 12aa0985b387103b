//! Central-difference check of the tape gradients in f64 for a tiny
//! two-layer network with layer norm, GELU and a smoothed NLL head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dysi::tensor::{Graph, ParamStore, Tensor};

fn loss(params: &ParamStore<f64>, x: &Tensor<f64>, targets: &[u32]) -> dysi::Result<(Graph<f64>, dysi::tensor::Var)> {
    let mut g = Graph::new();
    let id = |n: &str| params.find(n).expect("parameter");
    let x = g.constant(x.clone());
    let w1 = g.param(params, id("w1"));
    let b1 = g.param(params, id("b1"));
    let gamma = g.param(params, id("gamma"));
    let beta = g.param(params, id("beta"));
    let w2 = g.param(params, id("w2"));
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.layer_norm(h, gamma, beta)?;
    let h = g.gelu(h);
    let logits = g.matmul(h, w2)?;
    let lp = g.log_softmax(logits, 1)?;
    let mask = vec![true; targets.len()];
    let out = g.smoothed_nll(lp, targets, &mask, 0.1)?;
    Ok((g, out))
}

fn main() -> dysi::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand_tensor = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
    };
    let mut params = ParamStore::<f64>::new();
    params.insert("w1", rand_tensor(&[5, 8]))?;
    params.insert("b1", rand_tensor(&[8]))?;
    params.insert("gamma", rand_tensor(&[8]))?;
    params.insert("beta", rand_tensor(&[8]))?;
    params.insert("w2", rand_tensor(&[8, 4]))?;
    let x = rand_tensor(&[6, 5]);
    let targets = [0, 3, 1, 2, 2, 0];

    let (mut g, out) = loss(&params, &x, &targets)?;
    let grads = g.backward(out)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in params.ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).expect("gradient").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |d: f64| -> dysi::Result<f64> {
                let mut p = params.clone();
                p.get_mut(id).data_mut()[i] += d;
                let (g, v) = loss(&p, &x, &targets)?;
                Ok(g.value(v).item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        println!("{:<6} checked {} entries", params.name(id), analytic.len());
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
