use hrvq::tensor::{Graph, Tensor, Var};

use super::{off_zero, random};

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Projects `f`'s output onto fixed random weights and sums it, giving a
/// scalar whose gradient exercises every output element.
fn scalar_of(g: &mut Graph, out: Var, seed: u64) -> Var {
    if g.value(out).numel() == 1 {
        return out;
    }
    let w = g.constant(random(g.shape(out), seed));
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

/// Worst norm-wise relative error between autodiff and central differences
/// over all inputs. Stop-gradient values are replayed from the first pass.
pub fn gradcheck(inputs: &[Tensor], f: &Build) -> f64 {
    let mut g = Graph::new().record_stops();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let root = scalar_of(&mut g, out, 999);
    let stops = g.take_stops();
    let grads = g.backward(root).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new().replay_stops(stops.clone());
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let root = scalar_of(&mut g, out, 999);
        g.value(root).item() as f64
    };
    let eps = 1e-2f32;
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let ad = grads.get_or_zeros(vars[i], t.numel());
        let mut fd = vec![0.0f64; t.numel()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += eps;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * eps;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * eps as f64);
        }
        let diff: f64 = ad.iter().zip(&fd).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(ad.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt());
        if scale > 1e-9 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}

/// Relative gradient error of every differentiable op on its fixed-seed case.
pub fn op_corpus() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: &[Tensor], f: &Build| out.push((name, gradcheck(inputs, f)));
    let (a, b) = (random(&[2, 3], 1), random(&[2, 3], 2));
    check("add", &[a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
    check("sub", &[a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", &[a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", &[a.clone()], &|g, v| g.scale(v[0], -1.7).unwrap());
    check("relu", &[off_zero(&[3, 4], 3)], &|g, v| g.relu(v[0]).unwrap());
    check("sum", &[random(&[3, 4], 4)], &|g, v| g.sum(v[0]).unwrap());
    check("mse", &[random(&[2, 3, 4], 5), random(&[2, 3, 4], 6)], &|g, v| g.mse(v[0], v[1]).unwrap());
    let mask = Tensor::from_fn([2, 3], |i| (i % 2) as f32);
    check("mul_const", &[a], &move |g, v| g.mul_const(v[0], &mask).unwrap());
    check("conv2d s1", &[random(&[2, 3, 5, 5], 1), random(&[4, 3, 3, 3], 2)], &|g, v| {
        g.conv2d(v[0], v[1], 1, 1).unwrap()
    });
    check("conv2d s2", &[random(&[1, 2, 8, 8], 3), random(&[2, 2, 4, 4], 4)], &|g, v| {
        g.conv2d(v[0], v[1], 2, 3).unwrap()
    });
    check("conv2d_transpose", &[random(&[2, 4, 3, 3], 5), random(&[4, 2, 4, 4], 6)], &|g, v| {
        g.conv2d_transpose(v[0], v[1], 2, 1).unwrap()
    });
    check("add_channel_bias", &[random(&[2, 3, 2, 2], 7), random(&[3], 8)], &|g, v| {
        g.add_channel_bias(v[0], v[1]).unwrap()
    });
    check("add_spatial_broadcast", &[random(&[2, 3, 2, 2], 9), random(&[2, 3, 1, 1], 10)], &|g, v| {
        g.add_spatial_broadcast(v[0], v[1]).unwrap()
    });
    check("matmul", &[random(&[3, 4], 11), random(&[4, 5], 12)], &|g, v| g.matmul(v[0], v[1]).unwrap());
    // Repeated rows accumulate; row 4 is never used.
    let rows = [0u32, 2, 2, 1, 3, 0, 2, 1];
    check("gather", &[random(&[5, 3], 1)], &move |g, v| g.gather(v[0], &rows, [2, 2, 2]).unwrap());
    let targets = [0u32, 3, 1, 1, 2, 0, 3, 3, 2, 1, 0, 2];
    check("softmax_cross_entropy", &[random(&[2, 4, 2, 3], 2)], &move |g, v| {
        g.softmax_cross_entropy(v[0], &targets).unwrap()
    });
    check("straight_through", &[random(&[2, 3], 3), random(&[2, 3], 4)], &|g, v| {
        g.straight_through(v[0], v[1]).unwrap()
    });
    check("stop_gradient", &[random(&[2, 3], 5), random(&[2, 3], 6)], &|g, v| {
        let s = g.stop_gradient(v[0]).unwrap();
        g.mul(s, v[1]).unwrap()
    });
    out
}
