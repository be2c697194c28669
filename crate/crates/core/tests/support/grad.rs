use mdsp::tensor::{Activation, Tape, Var};
use mdsp::{Mdsp, NetworkSpec, TaskSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const NET_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Distinct values spaced far beyond the step size, in random order.
pub fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduces any output to a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// Worst relative error of d(project(f(inputs)))/d(inputs) over every
/// input element.
pub fn op_error(seed: u64, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grad)).collect();
        let y = f(&mut tape, &vars);
        let l = project(&mut tape, y, seed);
        (tape, vars, l)
    };
    let (tape, vars, l) = eval(&inputs, true);
    let g = tape.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let (tp, _, lp) = eval(&plus, false);
            let (tm, _, lm) = eval(&minus, false);
            let numeric = (tp.value(lp).item().unwrap() - tm.value(lm).item().unwrap()) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Every differentiable op at one seed, as `(name, worst relative error)`.
pub fn op_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    let (stride, k) = [(1, 3), (2, 3), (1, 1), (2, 1)][seed as usize % 4];
    let (x, w, b) = (random(&mut rng, &[2, 3, 6, 6]), random(&mut rng, &[4, 3, k, k]), random(&mut rng, &[4]));
    push("conv2d", op_error(seed, vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, k / 2).unwrap()));

    let x = separated(&mut rng, &[2, 2, 6, 6]);
    let (k, s, p) = [(2, 2, 0), (5, 1, 2), (3, 2, 1)][seed as usize % 3];
    push("maxpool2d", op_error(seed, vec![x], |t, v| t.maxpool2d(v[0], k, s, p).unwrap()));

    let (a, b) = (random(&mut rng, &[2, 2, 3, 3]), random(&mut rng, &[2, 3, 6, 6]));
    push(
        "upsample+concat",
        op_error(seed, vec![a, b], |t, v| {
            let u = t.upsample_nearest(v[0], 2).unwrap();
            t.concat_channels(&[u, v[1]]).unwrap()
        }),
    );

    let x = separated(&mut rng, &[1, 2, 4, 5]);
    for kind in [Activation::Identity, Activation::Relu, Activation::Elu, Activation::Sigmoid] {
        push(&format!("{:?}", kind).to_lowercase(), op_error(seed, vec![x.clone()], |t, v| t.activation(v[0], kind)));
    }

    let (x, g, b) = (random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[2]), random(&mut rng, &[2]));
    push(
        "batchnorm_train",
        op_error(seed, vec![x.clone(), g.clone(), b.clone()], |t, v| t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap().0),
    );
    let (mean, var) = (vec![0.1, -0.2], vec![0.5, 2.0]);
    push("batchnorm_eval", op_error(seed, vec![x, g, b], |t, v| t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()));

    let (a, b) = (random(&mut rng, &[2, 3, 2, 2]), random(&mut rng, &[2, 3, 2, 2]));
    push(
        "add/mul/scale/add_all",
        op_error(seed, vec![a.clone(), b], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let m = t.mul(s, v[0]).unwrap();
            let c = t.scale(m, 0.7);
            t.add_all(&[c, v[1], s]).unwrap()
        }),
    );
    push("sum", op_error(seed, vec![a.clone()], |t, v| t.sum(v[0])));
    let idx: Vec<usize> = (0..10).map(|_| rng.random_range(0..24)).collect();
    push("gather", op_error(seed, vec![a.clone()], |t, v| t.gather(v[0], idx.clone()).unwrap()));
    push("gather_as", op_error(seed, vec![a], |t, v| t.gather_as(v[0], idx.clone(), vec![5, 2]).unwrap()));

    let x = random(&mut rng, &[2, 4, 3, 3]);
    let targets: Vec<f64> = (0..72).map(|_| rng.random_range(0.0..1.0)).collect();
    push("bce_with_logits", op_error(seed, vec![x.clone()], |t, v| t.bce_with_logits(v[0], targets.clone(), 7.0).unwrap()));
    push("squared_error", op_error(seed, vec![x.clone()], |t, v| t.squared_error(v[0], targets.clone(), 3.0).unwrap()));
    let labels: Vec<usize> = (0..18).map(|_| rng.random_range(0..4)).collect();
    push("cross_entropy", op_error(seed, vec![x.clone()], |t, v| t.cross_entropy(v[0], labels.clone(), 1, 18.0).unwrap()));
    let labels: Vec<usize> = (0..24).map(|_| rng.random_range(0..3)).collect();
    push("cross_entropy_last_axis", op_error(seed, vec![x], |t, v| t.cross_entropy(v[0], labels.clone(), 3, 5.0).unwrap()));
    out
}

/// Full network, all tasks, training-mode batch norm, checked on a random
/// sample of parameter entries. Central differences over a ReLU network are
/// only valid away from kinks, so an element whose estimates at `h` and `h/2`
/// disagree is sampled again instead of compared. Returns the worst error.
pub fn network_error(seed: u64) -> Result<f64, String> {
    use mdsp::synth::{generate_dataset, GenSpec};
    use mdsp::train::step_losses;
    use mdsp::Task;

    const NET_H: f64 = 1e-6;
    const CHECKS: usize = 12;
    const MAX_DRAWS: usize = 48;

    let data = generate_dataset(&GenSpec::new(32), 2).unwrap();
    let lambdas = [(Task::Detect, 0.9), (Task::Segment, 1.3), (Task::Pose, 0.8)];
    let spec = NetworkSpec::new(32, 0.0625);
    let model = Mdsp::<f64>::build(&spec, seed).unwrap();
    let loss_of = |m: &Mdsp<f64>| {
        let mut tape = Tape::new();
        let s = step_losses(m, &mut tape, &data, TaskSet::ALL, &lambdas).unwrap();
        (tape.value(s.total).item().unwrap(), tape, s.total)
    };
    let (_, tape, total) = loss_of(&model);
    let grads = tape.backward(total).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.param_ids().collect();
    let central = |id, i, h: f64| {
        let mut plus = model.clone();
        plus.store.get_mut(id).data_mut()[i] += h;
        let mut minus = model.clone();
        minus.store.get_mut(id).data_mut()[i] -= h;
        (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h)
    };
    let (mut checked, mut draws, mut worst) = (0, 0, 0.0f64);
    while checked < CHECKS {
        if draws >= MAX_DRAWS {
            return Err(format!("seed {}: too many non-smooth samples", seed));
        }
        draws += 1;
        let id = ids[rng.random_range(0..ids.len())];
        let i = rng.random_range(0..model.store.get(id).numel());
        let n1 = central(id, i, NET_H);
        let n2 = central(id, i, NET_H / 2.0);
        if rel_err(n1, n2) > NET_TOL / 10.0 {
            continue;
        }
        let analytic = grads.param(id).map_or(0.0, |g| g[i]);
        let e = rel_err(analytic, n2);
        if e > NET_TOL {
            return Err(format!("seed {} {}[{}]: analytic {} numeric {}", seed, model.store.entry(id).name, i, analytic, n2));
        }
        worst = worst.max(e);
        checked += 1;
    }
    Ok(worst)
}
