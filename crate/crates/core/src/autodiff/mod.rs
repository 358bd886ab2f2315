//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{Axis, Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use crate::error::{Error, Result};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Values bounded away from zero, for the kink in `abs`.
    fn random_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let mut t = random(rng, shape);
        for v in t.data_mut() {
            *v = v.signum() * (0.1 + v.abs());
        }
        t
    }

    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
        (rng.random_range(1..5), rng.random_range(1..5))
    }

    // Reduces an arbitrary output to a scalar with non-uniform weights so that
    // every output entry influences the loss differently.
    fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var> {
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
        let w = g.constant(w)?;
        let p = g.mul(out, w)?;
        g.sum(p)
    }

    #[test]
    fn elementwise_add() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2)).unwrap();
        let m = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let b = g.constant(m.clone()).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &m);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0; 3])).unwrap();
        let s = g.softmax(a).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0])).unwrap();
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum(xx).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0)).unwrap();
        let y = g.tanh(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_variable_is_detached() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.param(Tensor::scalar(1.0)).unwrap();
        let _ = g2.param(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g2.backward(x), Err(Error::Detached)));
        assert!(matches!(g2.tanh(x), Err(Error::Detached)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let err = g.add(a, c).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        assert!(matches!(g.param(Tensor::scalar(f64::NAN)), Err(Error::NonFinite { .. })));
        let a = g.constant(Tensor::scalar(1e308)).unwrap();
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn bias_broadcasts_over_leading_axis_only() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap()).unwrap();
        let b = g.param(Tensor::vector(vec![10.0, 20.0])).unwrap();
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);

        let c = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(g.add(x, c).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x, dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let xx = g.mul(x, x).unwrap();
        let tx = g.scale(x, 3.0).unwrap();
        let y = g.add(xx, tx).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn shared_subexpression_matches_duplicated_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random(&mut rng, &[3, 4]);
            let w = random(&mut rng, &[4, 4]);

            // shared: h = tanh(x w); loss = sum(h * h + h)
            let mut g = Graph::new();
            let (xv, wv) = (g.param(x.clone()).unwrap(), g.param(w.clone()).unwrap());
            let m = g.matmul(xv, wv).unwrap();
            let h = g.tanh(m).unwrap();
            let hh = g.mul(h, h).unwrap();
            let s = g.add(hh, h).unwrap();
            let loss = g.sum(s).unwrap();
            let shared = g.backward(loss).unwrap();

            // expanded: three independent copies of tanh(x w)
            let mut e = Graph::new();
            let (xe, we) = (e.param(x.clone()).unwrap(), e.param(w.clone()).unwrap());
            let mut hs = Vec::new();
            for _ in 0..3 {
                let m = e.matmul(xe, we).unwrap();
                hs.push(e.tanh(m).unwrap());
            }
            let hh = e.mul(hs[0], hs[1]).unwrap();
            let s = e.add(hh, hs[2]).unwrap();
            let loss = e.sum(s).unwrap();
            let expanded = e.backward(loss).unwrap();

            for (a, b) in [(xv, xe), (wv, we)] {
                for (p, q) in shared.get(a).unwrap().data().iter().zip(expanded.get(b).unwrap().data()) {
                    assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()), "{p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[5, 7]);
        let b = random(&mut rng, &[7, 3]);
        let run = || {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
            let m = g.matmul(x, y).unwrap();
            let s = g.log_softmax(m).unwrap();
            g.value(s).clone()
        };
        let (p, q) = (run(), run());
        assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    type Case = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)>;

    fn primitive_cases() -> Vec<(&'static str, Case)> {
        vec![
            ("add", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c]), random(rng, &[c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.add(v[0], v[1])?;
                    weighted_sum(g, o)
                }))
            })),
            ("sub", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c]), random(rng, &[r, c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.sub(v[0], v[1])?;
                    weighted_sum(g, o)
                }))
            })),
            ("mul", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c]), random(rng, &[c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.mul(v[0], v[1])?;
                    weighted_sum(g, o)
                }))
            })),
            ("matmul", Box::new(|rng| {
                let (m, k) = dims(rng);
                let n = rng.random_range(1..5);
                (vec![random(rng, &[m, k]), random(rng, &[k, n])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.matmul(v[0], v[1])?;
                    weighted_sum(g, o)
                }))
            })),
            ("tanh", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.tanh(v[0])?;
                    weighted_sum(g, o)
                }))
            })),
            ("sigmoid", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.sigmoid(v[0])?;
                    weighted_sum(g, o)
                }))
            })),
            ("abs", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random_nonzero(rng, &[r, c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.abs(v[0])?;
                    weighted_sum(g, o)
                }))
            })),
            ("softmax", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c + 1])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.softmax(v[0])?;
                    weighted_sum(g, o)
                }))
            })),
            ("log_softmax", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c + 1])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.log_softmax(v[0])?;
                    weighted_sum(g, o)
                }))
            })),
            ("concat", Box::new(|rng| {
                let (r, c) = dims(rng);
                let c2 = rng.random_range(1..4);
                (vec![random(rng, &[r, c]), random(rng, &[r, c2]), random(rng, &[2, c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let a = g.concat(&[v[0], v[1]], Axis::Last)?;
                    let b = g.concat(&[v[0], v[2]], Axis::First)?;
                    let (sa, sb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
                    g.add(sa, sb)
                }))
            })),
            ("slice", Box::new(|rng| {
                let r = rng.random_range(2..5);
                let c = rng.random_range(2..6);
                (vec![random(rng, &[r, c])], Box::new(move |g: &mut Graph, v: &[Var]| {
                    let a = g.slice(v[0], Axis::Last, 1, c - 1)?;
                    let b = g.slice(v[0], Axis::First, 0, r - 1)?;
                    let (sa, sb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
                    g.add(sa, sb)
                }))
            })),
            ("sum", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let t = g.tanh(v[0])?;
                    let s = g.sum(t)?;
                    g.mul(s, s)
                }))
            })),
            ("mean", Box::new(|rng| {
                let (r, c) = dims(rng);
                (vec![random(rng, &[r, c])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let t = g.tanh(v[0])?;
                    let s = g.mean(t)?;
                    g.mul(s, s)
                }))
            })),
            ("lookup", Box::new(|rng| {
                let (m, d) = dims(rng);
                let n = rng.random_range(1..6);
                let idx: Vec<Option<usize>> =
                    (0..n).map(|_| if rng.random_bool(0.8) { Some(rng.random_range(0..m)) } else { None }).collect();
                (vec![random(rng, &[m, d])], Box::new(move |g: &mut Graph, v: &[Var]| {
                    let o = g.lookup(v[0], &idx)?;
                    let t = g.tanh(o)?;
                    weighted_sum(g, t)
                }))
            })),
            ("gather", Box::new(|rng| {
                let (n, m) = dims(rng);
                let idx: Vec<Option<usize>> =
                    (0..n).map(|_| if rng.random_bool(0.8) { Some(rng.random_range(0..m)) } else { None }).collect();
                (vec![random(rng, &[n, m])], Box::new(move |g: &mut Graph, v: &[Var]| {
                    let l = g.log_softmax(v[0])?;
                    let o = g.gather(l, &idx)?;
                    weighted_sum(g, o)
                }))
            })),
            ("lstm_update", Box::new(|rng| {
                let (b, h) = dims(rng);
                (vec![random(rng, &[b, 4 * h]), random(rng, &[b, h])], Box::new(|g: &mut Graph, v: &[Var]| {
                    let o = g.lstm_update(v[0], v[1])?;
                    weighted_sum(g, o)
                }))
            })),
            ("select_rows", Box::new(|rng| {
                let (r, c) = dims(rng);
                let mask: Vec<bool> = (0..r).map(|_| rng.random_bool(0.5)).collect();
                (vec![random(rng, &[r, c]), random(rng, &[r, c])], Box::new(move |g: &mut Graph, v: &[Var]| {
                    let t = g.tanh(v[1])?;
                    let o = g.select_rows(&mask, v[0], t)?;
                    let o = g.mul(o, v[0])?;
                    weighted_sum(g, o)
                }))
            })),
        ]
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, case) in primitive_cases() {
            for trial in 0..100 {
                let (params, f) = case(&mut rng);
                let report = check_gradients(&params, f, 1e-5, 1e-7).unwrap();
                assert!(report.passes(1e-4), "{name} trial {trial}: {report:?}");
            }
        }
    }

    #[test]
    fn lstm_update_matches_primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (b, h) = dims(&mut rng);
            let gates = random(&mut rng, &[b, 4 * h]);
            let cell = random(&mut rng, &[b, h]);
            let mut g = Graph::new();
            let (gv, cv) = (g.param(gates.clone()).unwrap(), g.param(cell.clone()).unwrap());
            let fused = g.lstm_update(gv, cv).unwrap();

            let i = g.slice(gv, Axis::Last, 0, h).unwrap();
            let f = g.slice(gv, Axis::Last, h, h).unwrap();
            let c = g.slice(gv, Axis::Last, 2 * h, h).unwrap();
            let o = g.slice(gv, Axis::Last, 3 * h, h).unwrap();
            let (i, f, c, o) = (g.sigmoid(i).unwrap(), g.sigmoid(f).unwrap(), g.tanh(c).unwrap(), g.sigmoid(o).unwrap());
            let fc = g.mul(f, cv).unwrap();
            let ic = g.mul(i, c).unwrap();
            let c_new = g.add(fc, ic).unwrap();
            let tc = g.tanh(c_new).unwrap();
            let h_new = g.mul(o, tc).unwrap();
            let composed = g.concat(&[h_new, c_new], Axis::Last).unwrap();

            for (p, q) in g.value(fused).data().iter().zip(g.value(composed).data()) {
                assert!((p - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn random_three_layer_composition_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let params = vec![
                random(&mut rng, &[4, 5]),
                random(&mut rng, &[5, 6]),
                random(&mut rng, &[6]),
                random(&mut rng, &[6, 3]),
                random(&mut rng, &[3, 4]),
            ];
            let f = |g: &mut Graph, v: &[Var]| {
                let x = g.constant(Tensor::from_rows(&[vec![0.5, -0.2, 0.1, 0.9], vec![-0.7, 0.3, 0.0, 0.4], vec![0.2, 0.2, -0.5, 0.1]])?)?;
                let h = g.matmul(x, v[0])?;
                let h = g.tanh(h)?;
                let h = g.matmul(h, v[1])?;
                let h = g.add(h, v[2])?;
                let h = g.sigmoid(h)?;
                let h = g.matmul(h, v[3])?;
                let h = g.log_softmax(h)?;
                let picked = g.gather(h, &[Some(0), Some(2), None])?;
                let l = g.sum(picked)?;
                let w = g.matmul(v[4], v[0])?;
                let w = g.abs(w)?;
                let w = g.mean(w)?;
                g.sub(w, l)
            };
            let report = check_gradients(&params, f, 1e-5, 1e-7).unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }
}
