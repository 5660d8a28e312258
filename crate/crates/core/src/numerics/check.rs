//! Finite-difference gradient oracle and per-primitive checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Primitive, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::{keyed_rng, Domain};

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone)]
pub struct PrimitiveReport {
    pub primitive: Primitive,
    pub rel_error: f64,
}

type Builder = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn case(p: Primitive) -> (Vec<Vec<usize>>, Builder) {
    match p {
        // Each case uses only its own primitive so an injected fault is named alone.
        Primitive::MatMul => (vec![vec![2, 3, 4], vec![4, 5], vec![2, 5, 3]], |g, v| {
            let shared = g.matmul(v[0], v[1])?;
            g.matmul(shared, v[2])
        }),
        Primitive::Add => (vec![vec![3, 4], vec![4]], |g, v| g.add(v[0], v[1])),
        Primitive::Sub => (vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        Primitive::Mul => (vec![vec![3, 4], vec![4]], |g, v| g.mul(v[0], v[1])),
        Primitive::Scale => (vec![vec![3, 4]], |g, v| Ok(g.scale(v[0], 1.7))),
        Primitive::Softmax => (vec![vec![3, 4]], |g, v| {
            // Odd depth, so a sign flip does not cancel along any path.
            let rows = g.softmax(v[0], 1)?;
            let cols = g.softmax(rows, 0)?;
            g.softmax(cols, 1)
        }),
        Primitive::LogSoftmax => (vec![vec![3, 5]], |g, v| g.log_softmax(v[0], 1)),
        Primitive::LayerNorm => (vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        Primitive::Gelu => (vec![vec![3, 4]], |g, v| Ok(g.gelu(v[0]))),
        Primitive::Permute => (vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        Primitive::Reshape => (vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        Primitive::Concat => (vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        Primitive::GatherRows => (vec![vec![4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        Primitive::MeanAxis => (vec![vec![3, 4, 2]], |g, v| g.mean_axis(v[0], 1)),
        Primitive::Sum => (vec![vec![3, 4]], |g, v| Ok(g.sum(v[0]))),
    }
}

/// Compares the backward rule of `p` with central differences of the scalar
/// `Σ c ⊙ op(inputs)` for random inputs and coefficients.
pub fn check_primitive(p: Primitive, seed: u64, h: f64, fault: Option<Primitive>) -> Result<PrimitiveReport> {
    let (shapes, build) = case(p);
    let mut rng = keyed_rng(Domain::Gradcheck, &[seed, p as u64]);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            (0..s.iter().product::<usize>())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();

    let eval = |flat: &[f64]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let mut off = 0;
        let mut vars = Vec::new();
        for s in &shapes {
            let n: usize = s.iter().product();
            vars.push(g.param(Tensor::from_f64(s, &flat[off..off + n])?));
            off += n;
        }
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let theta: Vec<f64> = inputs.concat();
    let (mut g, vars, out) = eval(&theta)?;
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let out_shape = g.shape(out).to_vec();
    let coeffs: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = g.backward_seeded(out, &Tensor::from_f64(&out_shape, &coeffs)?)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&shapes)
        .flat_map(|(&v, s)| {
            grads
                .get(v)
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; s.iter().product()])
        })
        .collect();

    let numeric = finite_diff_grad(
        |x| {
            let (g, _, out) = eval(x).expect("same shapes as the reference evaluation");
            g.value(out).data().iter().zip(&coeffs).map(|(a, c)| a * c).sum()
        },
        &theta,
        h,
    );
    Ok(PrimitiveReport {
        primitive: p,
        rel_error: relative_error(&analytic, &numeric),
    })
}

/// Worst relative error per primitive over `seeds` random draws.
pub fn check_all_primitives(seeds: u64, h: f64, fault: Option<Primitive>) -> Result<Vec<PrimitiveReport>> {
    Primitive::ALL
        .iter()
        .map(|&p| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                worst = worst.max(check_primitive(p, seed, h, fault)?.rel_error);
            }
            Ok(PrimitiveReport {
                primitive: p,
                rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for r in check_all_primitives(10, 1e-5, None).unwrap() {
            assert!(r.rel_error < 1e-6, "{}: {}", r.primitive, r.rel_error);
        }
    }

    #[test]
    fn injected_sign_flip_is_caught_and_named() {
        let reports = check_all_primitives(1, 1e-5, Some(Primitive::Gelu)).unwrap();
        let failing: Vec<_> = reports
            .iter()
            .filter(|r| r.rel_error >= 1e-6)
            .map(|r| r.primitive)
            .collect();
        assert_eq!(failing, vec![Primitive::Gelu]);
    }
}
