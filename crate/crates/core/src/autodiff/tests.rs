use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;
const BN_FD_EPS: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn each_instance(mut case: impl FnMut(&mut ChaCha8Rng) -> f64, what: &str) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = case(&mut rng);
        assert!(err <= TOL, "{what}: seed {seed} rel err {err:e}");
    }
}

#[test]
fn elementwise_ops() {
    each_instance(
        |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            let inputs = [rand_tensor(rng, &shape, -2.0, 2.0), rand_tensor(rng, &shape, -2.0, 2.0)];
            let c = rng.random_range(-3.0..3.0);
            gradcheck(&inputs, EPS, |g, x| {
                let a = g.add(x[0], x[1])?;
                let s = g.sub(a, x[1])?;
                let m = g.mul(s, x[1])?;
                let r = g.sew_residual(m, x[0])?;
                g.scale(r, c)
            })
            .unwrap()
        },
        "add/sub/mul/scale",
    );
}

#[test]
fn reductions_and_reshape() {
    each_instance(
        |rng| {
            let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
            let inputs = [rand_tensor(rng, &[a, b, 2], -1.0, 1.0)];
            let sum = gradcheck(&inputs, EPS, |g, x| {
                let r = g.reshape(x[0], &[a * b, 2])?;
                let sq = g.mul(r, r)?;
                g.sum(sq)
            })
            .unwrap();
            let mean = gradcheck(&inputs, EPS, |g, x| {
                let sq = g.mul(x[0], x[0])?;
                g.mean(sq)
            })
            .unwrap();
            sum.max(mean)
        },
        "sum/mean/reshape",
    );
}

#[test]
fn linear() {
    each_instance(
        |rng| {
            let (n, i, o) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
            let inputs = [
                rand_tensor(rng, &[n, i], -1.0, 1.0),
                rand_tensor(rng, &[i, o], -1.0, 1.0),
                rand_tensor(rng, &[o], -1.0, 1.0),
            ];
            let with_bias = gradcheck(&inputs, EPS, |g, x| g.linear(x[0], x[1], Some(x[2]))).unwrap();
            let without = gradcheck(&inputs[..2], EPS, |g, x| g.linear(x[0], x[1], None)).unwrap();
            with_bias.max(without)
        },
        "linear",
    );
}

#[test]
fn conv2d() {
    each_instance(
        |rng| {
            let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
            let k = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let side = k + rng.random_range(0..3);
            let inputs = [
                rand_tensor(rng, &[n, c, side, side], -1.0, 1.0),
                rand_tensor(rng, &[o, c, k, k], -1.0, 1.0),
                rand_tensor(rng, &[o], -1.0, 1.0),
            ];
            gradcheck(&inputs, EPS, |g, x| g.conv2d(x[0], x[1], Some(x[2]), stride, pad)).unwrap()
        },
        "conv2d",
    );
}

#[test]
fn batchnorm_train_and_eval() {
    each_instance(
        |rng| {
            let (n, c) = (rng.random_range(2..4), rng.random_range(1..3));
            let shape: Vec<usize> = if rng.random_bool(0.5) {
                vec![n, c]
            } else {
                vec![n, c, 2, rng.random_range(1..3)]
            };
            let inputs = [
                rand_tensor(rng, &shape, -2.0, 2.0),
                rand_tensor(rng, &[c], 0.5, 1.5),
                rand_tensor(rng, &[c], -0.5, 0.5),
            ];
            let mut eval_state = BatchNormState::new(c);
            eval_state.running_mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            eval_state.running_var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let train = gradcheck(&inputs, BN_FD_EPS, |g, x| {
                let mut st = BatchNormState::new(c);
                let y = g.batchnorm2d(x[0], x[1], x[2], &mut st, NormMode::Train)?;
                // square so the normalized output's zero-sum gradient is not trivial
                g.mul(y, y)
            })
            .unwrap();
            let eval = gradcheck(&inputs, EPS, |g, x| {
                let mut st = eval_state.clone();
                g.batchnorm2d(x[0], x[1], x[2], &mut st, NormMode::Eval)
            })
            .unwrap();
            train.max(eval)
        },
        "batchnorm2d",
    );
}

#[test]
fn sigmoid_softmax_pool() {
    each_instance(
        |rng| {
            let (n, c) = (rng.random_range(1..4), rng.random_range(2..5));
            let rows = [rand_tensor(rng, &[n, c], -3.0, 3.0)];
            let sig = gradcheck(&rows, EPS, |g, x| g.sigmoid(x[0])).unwrap();
            let soft = gradcheck(&rows, EPS, |g, x| g.softmax_rows(x[0])).unwrap();
            let k = rng.random_range(1..3);
            let img = [rand_tensor(rng, &[n, 2, 2 * k, 2 * k], -1.0, 1.0)];
            let pool = gradcheck(&img, EPS, |g, x| g.avg_pool2d(x[0], k)).unwrap();
            sig.max(soft).max(pool)
        },
        "sigmoid/softmax/avg_pool2d",
    );
}

#[test]
fn time_mean_and_cross_entropy() {
    each_instance(
        |rng| {
            let (t, n, c) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(2..5));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let inputs = [rand_tensor(rng, &[t * n, c], -3.0, 3.0)];
            let mt = gradcheck(&inputs, EPS, |g, x| g.mean_time(x[0], t)).unwrap();
            let ce = gradcheck(&inputs, EPS, |g, x| {
                let m = g.mean_time(x[0], t)?;
                g.cross_entropy(m, &labels)
            })
            .unwrap();
            mt.max(ce)
        },
        "mean_time/cross_entropy",
    );
}

#[test]
fn tad_loss_full_gradient() {
    each_instance(
        |rng| {
            let (t, n, c) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(2..5));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let inputs = [rand_tensor(rng, &[t * n, c], -3.0, 3.0)];
            let cfg = TadConfig {
                temperature: rng.random_range(0.5..3.0),
                detach_weights: false,
            };
            gradcheck(&inputs, EPS, |g, x| g.tad_loss(x[0], t, &labels, &cfg)).unwrap()
        },
        "tad_loss",
    );
}

#[test]
fn tad_loss_detached_weights_are_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, n, c) = (3, 2, 4);
    let labels = vec![1, 3];
    let x = rand_tensor(&mut rng, &[t * n, c], -2.0, 2.0);
    let mut g = Graph::new();
    let id = g.leaf(x.clone());
    let loss = g.tad_loss(id, t, &labels, &TadConfig::default()).unwrap();
    let grad = g.backward(loss).unwrap().wrt(id);
    let weights = loss::tad_forward(&x, t, &labels, &TadConfig::default()).unwrap().weights;
    for ti in 0..t {
        for s in 0..n {
            let row = &x.data()[(ti * n + s) * c..(ti * n + s + 1) * c];
            let lse = loss::logsumexp(row);
            for k in 0..c {
                let p = (row[k] - lse).exp();
                let y = if k == labels[s] { 1.0 } else { 0.0 };
                let want = weights[s * t + ti] * (p - y) / n as f64;
                let got = grad.data()[(ti * n + s) * c + k];
                assert!((got - want).abs() < 1e-12, "t{ti} n{s} k{k}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn shared_weight_gradients_accumulate() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::scalar(3.0));
    let x = g.leaf(Tensor::scalar(2.0));
    let a = g.mul(w, x).unwrap();
    let b = g.mul(w, w).unwrap();
    let s = g.add(a, b).unwrap();
    let grads = g.backward(s).unwrap();
    // d/dw (w·x + w²) = x + 2w
    assert_eq!(grads.wrt(w).data(), &[8.0]);
    assert_eq!(grads.wrt(x).data(), &[3.0]);
}

#[test]
fn backward_needs_scalar_root_and_own_nodes() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
    let mut other = Graph::new();
    other.leaf(Tensor::scalar(1.0));
    let far = other.leaf(Tensor::scalar(1.0));
    assert!(matches!(g.backward(far), Err(Error::Graph(_))));
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    assert_eq!(g.backward(y).unwrap().wrt(x).data(), &[2.0]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(f64::MAX));
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
}

/// Scalar network `x → W → LIF → V`, loss `Σ_t c_t·y_t`, differentiated in
/// forward mode one parameter at a time.
struct Toy {
    steps: usize,
    x: Vec<f64>,
    w: Vec<f64>,
    v: Vec<f64>,
    c: Vec<f64>,
    cfg: LifConfig,
}

impl Toy {
    fn random(rng: &mut ChaCha8Rng, detach_reset: bool) -> Self {
        let steps = rng.random_range(1..5);
        let neurons = rng.random_range(1..4);
        Toy {
            steps,
            x: (0..steps).map(|_| rng.random_range(0.0..1.5)).collect(),
            w: (0..neurons).map(|_| rng.random_range(0.3..1.2)).collect(),
            v: (0..neurons).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..steps).map(|_| rng.random_range(-1.0..1.0)).collect(),
            cfg: LifConfig {
                detach_reset,
                ..LifConfig::default()
            },
        }
    }

    /// `(dL/dx, dL/dW, dL/dV)` by tangent propagation.
    fn oracle(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.w.len();
        let run = |dx: &[f64], dw: &[f64], dv: &[f64]| -> f64 {
            let mut u = vec![0.0; n];
            let mut du = vec![0.0; n];
            let mut dl = 0.0;
            for t in 0..self.steps {
                let mut dy = 0.0;
                for i in 0..n {
                    let pre = self.cfg.tau_leak * u[i] + self.w[i] * self.x[t];
                    let dpre = self.cfg.tau_leak * du[i] + dw[i] * self.x[t] + self.w[i] * dx[t];
                    let s = if pre >= self.cfg.v_th { 1.0 } else { 0.0 };
                    let ds = if (pre - self.cfg.v_th).abs() <= self.cfg.surrogate_width / 2.0 {
                        dpre / self.cfg.surrogate_width
                    } else {
                        0.0
                    };
                    u[i] = pre - s * self.cfg.v_th;
                    du[i] = if self.cfg.detach_reset {
                        dpre
                    } else {
                        dpre - ds * self.cfg.v_th
                    };
                    dy += self.v[i] * ds + dv[i] * s;
                }
                dl += self.c[t] * dy;
            }
            dl
        };
        let basis = |len: usize, k: usize| (0..len).map(|j| if j == k { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let (zx, zn) = (vec![0.0; self.steps], vec![0.0; n]);
        let gx = (0..self.steps).map(|k| run(&basis(self.steps, k), &zn, &zn)).collect();
        let gw = (0..n).map(|k| run(&zx, &basis(n, k), &zn)).collect();
        let gv = (0..n).map(|k| run(&zx, &zn, &basis(n, k))).collect();
        (gx, gw, gv)
    }

    fn leaves(&self, g: &mut Graph) -> [NodeId; 4] {
        let n = self.w.len();
        [
            g.leaf(Tensor::new(&[self.steps, 1], self.x.clone()).unwrap()),
            g.leaf(Tensor::new(&[1, n], self.w.clone()).unwrap()),
            g.leaf(Tensor::new(&[n, 1], self.v.clone()).unwrap()),
            g.leaf(Tensor::new(&[self.steps, 1], self.c.clone()).unwrap()),
        ]
    }

    fn fused(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let [x, w, v, c] = self.leaves(&mut g);
        let i = g.linear(x, w, None).unwrap();
        let s = g.lif_unroll(i, self.steps, &self.cfg).unwrap();
        let y = g.linear(s, v, None).unwrap();
        let cy = g.mul(y, c).unwrap();
        let l = g.sum(cy).unwrap();
        let gr = g.backward(l).unwrap();
        (gr.wrt(x).into_data(), gr.wrt(w).into_data(), gr.wrt(v).into_data())
    }

    fn composed(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.w.len();
        let mut g = Graph::new();
        let [x, w, v, _] = self.leaves(&mut g);
        let currents = g.linear(x, w, None).unwrap();
        let mut u = g.leaf(Tensor::zeros(&[1, n]));
        let mut total = None;
        for t in 0..self.steps {
            let sel = g.leaf(Tensor::new(&[1, self.steps], (0..self.steps).map(|j| (j == t) as u8 as f64).collect()).unwrap());
            let i_t = g.linear(sel, currents, None).unwrap();
            let (_, s, next) = g.lif_step(u, i_t, &self.cfg).unwrap();
            u = next;
            let y = g.linear(s, v, None).unwrap();
            let ct = g.leaf(Tensor::scalar(self.c[t]));
            let y = g.reshape(y, &[1]).unwrap();
            let term = g.mul(y, ct).unwrap();
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term).unwrap(),
            });
        }
        let l = g.sum(total.unwrap()).unwrap();
        let gr = g.backward(l).unwrap();
        (gr.wrt(x).into_data(), gr.wrt(w).into_data(), gr.wrt(v).into_data())
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .filter(|e| e.is_finite())
        .fold(0.0, f64::max)
}

#[test]
fn lif_bptt_matches_scalar_oracle() {
    for detach in [false, true] {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let toy = Toy::random(&mut rng, detach);
            let want = toy.oracle();
            for (path, got) in [("fused", toy.fused()), ("composed", toy.composed())] {
                for (name, a, b) in [("x", &got.0, &want.0), ("W", &got.1, &want.1), ("V", &got.2, &want.2)] {
                    let e = rel(a, b);
                    assert!(e <= 1e-10, "{path} d{name} seed {seed} detach {detach}: {a:?} vs {b:?}");
                }
            }
        }
    }
}

#[test]
fn reset_path_changes_gradient() {
    // Two steps at input 1.0: the first spike's reset feeds the second step.
    let toy = Toy {
        steps: 2,
        x: vec![1.0, 1.0],
        w: vec![1.0],
        v: vec![1.0],
        c: vec![1.0, 1.0],
        cfg: LifConfig::default(),
    };
    let attached = toy.fused();
    let detached = Toy {
        cfg: LifConfig {
            detach_reset: true,
            ..LifConfig::default()
        },
        ..toy
    }
    .fused();
    assert_ne!(attached.0, detached.0);
}

fn mlp_grads(x: &Tensor, w: &Tensor, labels: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let (xi, wi) = (g.leaf(x.clone()), g.leaf(w.clone()));
    let h = g.linear(xi, wi, None).unwrap();
    let h = g.sigmoid(h).unwrap();
    let logits = g.softmax_rows(h).unwrap();
    let l = g.cross_entropy(logits, labels).unwrap();
    // cross_entropy averages over the batch; undo it to get the per-sample sum
    let l = g.scale(l, labels.len() as f64).unwrap();
    g.backward(l).unwrap().wrt(wi)
}

proptest::proptest! {
    #[test]
    fn backward_is_bitwise_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let labels = [0, 1, 2, 1];
        proptest::prop_assert_eq!(mlp_grads(&x, &w, &labels), mlp_grads(&x, &w, &labels));
    }

    #[test]
    fn batch_split_gradients_add_up(seed in 0u64..1000, half in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2 * half, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let labels: Vec<usize> = (0..2 * half).map(|_| rng.random_range(0..4)).collect();
        let full = mlp_grads(&x, &w, &labels);
        let mut parts = mlp_grads(&x.rows(0, half), &w, &labels[..half]);
        parts.add_assign(&mlp_grads(&x.rows(half, half), &w, &labels[half..]));
        for (a, b) in full.data().iter().zip(parts.data()) {
            proptest::prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}
