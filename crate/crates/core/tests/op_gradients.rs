//! Every differentiable op against central differences on random inputs.

use lttr::tensor::{check_gradients, Graph, ParamId, ParamStore, Tensor, Var};
use lttr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
    let n = shape.iter().product();
    // keep away from 0 so relu/abs kinks are not straddled
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    store.add(name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so that
/// every output element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn run(shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(shapes.len() as u64 * 31 + 7);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| rand_param(&mut store, &mut rng, &format!("p{i}"), s))
        .collect();
    let report = check_gradients(&mut store, &ids, 1e-6, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = build(g, &vars)?;
        weighted_sum(g, y, 99)
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn elementwise() {
    run(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    run(&[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    run(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    run(&[&[5]], |g, v| Ok(g.scale(v[0], -1.7)));
    run(&[&[5]], |g, v| Ok(g.add_scalar(v[0], 2.0)));
    run(&[&[2, 5]], |g, v| Ok(g.relu(v[0])));
    run(&[&[2, 5]], |g, v| Ok(g.sigmoid(v[0])));
    run(&[&[2, 5]], |g, v| Ok(g.abs(v[0])));
}

#[test]
fn broadcasting() {
    run(&[&[3, 2, 4], &[4]], |g, v| g.add_bias(v[0], v[1]));
    run(&[&[3, 2, 4], &[1, 4]], |g, v| g.mul_channels(v[0], v[1]));
    run(&[&[3, 4], &[3, 1]], |g, v| g.mul_rows(v[0], v[1]));
}

#[test]
fn linear_algebra() {
    run(&[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    run(&[&[3, 4]], |g, v| g.transpose(v[0]));
}

#[test]
fn normalisation() {
    run(&[&[3, 5]], |g, v| g.softmax(v[0], 1));
    run(&[&[3, 5, 2]], |g, v| g.softmax(v[0], 1));
    run(&[&[4, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn reductions_and_layout() {
    run(&[&[3, 4]], |g, v| Ok(g.sum(v[0])));
    run(&[&[3, 4]], |g, v| Ok(g.mean(v[0])));
    run(&[&[3, 4, 2]], |g, v| g.sum_axis(v[0], 1));
    run(&[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6]));
    run(&[&[6]], |g, v| g.gather(v[0], vec![5, 0, 0, 3], &[2, 2]));
    run(&[&[3, 4]], |g, v| g.slice(v[0], 1, 1, 3));
    run(&[&[2, 3], &[2, 1]], |g, v| g.concat(&[v[0], v[1]], 1));
    run(&[&[4, 4, 2]], |g, v| g.unfold_blocks(v[0], 2, 2));
    run(&[&[4, 8]], |g, v| g.fold_blocks(v[0], &[4, 4, 2], 2, 2));
}

#[test]
fn convolutions() {
    run(&[&[4, 4, 4, 2], &[3, 3, 3, 2, 3], &[3]], |g, v| g.conv3d(v[0], v[1], v[2], [2, 2, 2], [1, 1, 1]));
    run(&[&[5, 4, 3], &[3, 3, 3, 2], &[2]], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1));
}

#[test]
fn focal_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let data = (0..9).map(|_| rng.gen_range(0.05..0.95)).collect();
    let p = store.add("p", Tensor::new(vec![3, 3], data).unwrap()).unwrap();
    let target = Tensor::new(vec![3, 3], vec![0.5, 0.8, 0.5, 0.8, 1.0, 0.8, 0.5, 0.8, 0.5]).unwrap();
    let report = check_gradients(&mut store, &[p], 1e-6, |g| {
        let v = g.param(p);
        g.focal_loss(v, &target, 2.0, 4.0, 1e-6)
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}
