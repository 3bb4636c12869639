//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Coordinates that move a rectifier input lying within this distance
    /// of its kink are excluded.
    pub kink_margin: f64,
    /// Check a seeded random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            kink_margin: 1e-7,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences.
pub fn gradcheck<F>(f: F, x: &Tensor, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(&tape, xv)?;
    if y.value().numel() != 1 {
        return Err(Error::Usage("gradcheck needs a scalar-valued function".into()));
    }
    let analytic = tape.backward(y)?.wrt_or_zeros(xv);
    let base_kinks = tape.kink_inputs();

    let n = x.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };

    let eval = |xp: Tensor| -> Result<(f64, Vec<std::rc::Rc<Tensor>>)> {
        let t = Tape::new();
        let v = t.var(xp);
        let out = f(&t, v)?.item();
        Ok((out, t.kink_inputs()))
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += opts.step;
        let mut xm = x.clone();
        xm.data_mut()[i] -= opts.step;
        let (fp, kp) = eval(xp)?;
        let (fm, km) = eval(xm)?;
        if near_kink(&base_kinks, &kp, &km, opts.kink_margin) {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.step);
        let err = relative_error(analytic.data()[i], numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite {
                term: format!("gradcheck coordinate {i}"),
                step: 0,
            });
        }
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

fn near_kink(base: &[std::rc::Rc<Tensor>], plus: &[std::rc::Rc<Tensor>], minus: &[std::rc::Rc<Tensor>], margin: f64) -> bool {
    if base.len() != plus.len() || base.len() != minus.len() {
        return true;
    }
    for ((b, p), m) in base.iter().zip(plus).zip(minus) {
        for ((&vb, &vp), &vm) in b.data().iter().zip(p.data()).zip(m.data()) {
            if (vp > 0.0) != (vm > 0.0) {
                return true;
            }
            if vb.abs() < margin && vp != vm {
                return true;
            }
        }
    }
    false
}

/// Outcome of one named op in [`run_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub op: &'static str,
    pub report: GradcheckReport,
    pub passed: bool,
}

/// Settings shared by every op in the suite.
#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Spatial extent of image-shaped inputs; must be even and at least 4.
    pub size: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            size: 6,
            seed: 0,
            tolerance: 1e-5,
        }
    }
}

type Build = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

struct OpCase {
    name: &'static str,
    shapes: fn(usize) -> Vec<Vec<usize>>,
    build: Build,
}

fn img(s: usize) -> Vec<usize> {
    vec![2, 3, s, s]
}

const OPS: &[OpCase] = &[
    OpCase { name: "add", shapes: |s| vec![img(s), img(s)], build: |_, v| v[0].add(v[1]) },
    OpCase { name: "sub", shapes: |s| vec![img(s), img(s)], build: |_, v| v[0].sub(v[1]) },
    OpCase { name: "mul", shapes: |s| vec![img(s), img(s)], build: |_, v| v[0].mul(v[1]) },
    OpCase { name: "square", shapes: |s| vec![img(s)], build: |_, v| Ok(v[0].square()) },
    OpCase {
        name: "add_const",
        shapes: |s| vec![img(s)],
        build: |_, v| v[0].add_const(&Tensor::from_fn(&v[0].shape(), |i| (i as f64).cos())),
    },
    OpCase {
        name: "sub_const",
        shapes: |s| vec![img(s)],
        build: |_, v| v[0].sub_const(&Tensor::from_fn(&v[0].shape(), |i| (i as f64).cos())),
    },
    OpCase {
        name: "mul_const",
        shapes: |s| vec![img(s)],
        build: |_, v| v[0].mul_const(&Tensor::from_fn(&v[0].shape(), |i| (i as f64).sin())),
    },
    OpCase { name: "scale", shapes: |s| vec![img(s)], build: |_, v| Ok(v[0].scale(-1.7)) },
    OpCase { name: "sum", shapes: |s| vec![img(s)], build: |_, v| Ok(v[0].square().sum()) },
    OpCase { name: "mean", shapes: |s| vec![img(s)], build: |_, v| Ok(v[0].square().mean()) },
    OpCase { name: "relu", shapes: |s| vec![img(s)], build: |_, v| Ok(v[0].relu()) },
    OpCase { name: "leaky_relu", shapes: |s| vec![img(s)], build: |_, v| Ok(v[0].leaky_relu(0.2)) },
    OpCase {
        name: "conv2d",
        shapes: |s| vec![img(s), vec![4, 3, 3, 3], vec![4]],
        build: |_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1),
    },
    OpCase {
        name: "conv2d_strided",
        shapes: |s| vec![img(s), vec![2, 3, 4, 4], vec![2]],
        build: |_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1),
    },
    OpCase {
        name: "conv1x1",
        shapes: |s| vec![img(s), vec![4, 3, 1, 1], vec![4]],
        build: |_, v| v[0].conv1x1(v[1], Some(v[2])),
    },
    OpCase { name: "instance_norm", shapes: |s| vec![img(s)], build: |_, v| v[0].instance_norm(1e-5) },
    OpCase { name: "nn_upsample", shapes: |s| vec![img(s)], build: |_, v| v[0].nn_upsample(2) },
    OpCase { name: "downsample_avg", shapes: |s| vec![img(s)], build: |_, v| v[0].downsample_avg(2) },
    OpCase { name: "gaussian_blur", shapes: |s| vec![img(s)], build: |_, v| v[0].gaussian_blur(1.2) },
    OpCase { name: "softmax_spatial", shapes: |s| vec![img(s)], build: |_, v| v[0].softmax_spatial() },
    OpCase {
        name: "channel_affine",
        shapes: |s| vec![img(s)],
        build: |_, v| v[0].channel_affine(&[2, 1, 0], &[2.0, -0.5, 1.5], &[0.1, 0.2, -0.3]),
    },
    OpCase { name: "gram", shapes: |s| vec![img(s)], build: |_, v| v[0].gram() },
    OpCase { name: "matmul", shapes: |s| vec![vec![3, s], vec![s, 4]], build: |_, v| v[0].matmul(v[1]) },
    OpCase { name: "reshape", shapes: |s| vec![img(s)], build: |_, v| v[0].reshape(&[6, v[0].shape()[2] * v[0].shape()[3]]) },
    OpCase { name: "concat_channels", shapes: |s| vec![img(s), vec![2, 1, s, s]], build: |t, v| t.concat_channels(&[v[0], v[1]]) },
    OpCase {
        name: "kl_from_target",
        shapes: |s| vec![vec![2, 1, s, s]],
        build: |_, v| {
            let sh = v[0].shape();
            let n = sh[2] * sh[3];
            let target = Tensor::from_fn(&sh, |i| (1.0 + (i % n) as f64) / (n * (n + 1) / 2) as f64);
            v[0].softmax_spatial()?.kl_from_target(&target, 1e-12)
        },
    },
];

fn projected<'t>(tape: &'t Tape, x: Var<'t>, which: usize, inputs: &[Tensor], build: Build, proj: &Tensor) -> Result<Var<'t>> {
    let vars: Vec<Var<'t>> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if i == which { x } else { tape.constant(t.clone()) })
        .collect();
    Ok(build(tape, &vars)?.mul_const(proj)?.sum())
}

/// Names accepted by [`run_suite`].
pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|c| c.name).collect()
}

/// Checks every input of each named op (all ops when `names` is empty). The
/// op output is reduced to a scalar with a seeded random projection.
pub fn run_suite(names: &[String], opts: &SuiteOptions) -> Result<Vec<OpResult>> {
    if opts.size < 4 || opts.size % 2 != 0 {
        return Err(Error::Usage(format!("gradcheck size must be even and at least 4, got {}", opts.size)));
    }
    for n in names {
        if !OPS.iter().any(|c| c.name == n) {
            return Err(Error::Usage(format!("unknown op `{n}`; known ops: {}", op_names().join(", "))));
        }
    }
    let mut out = Vec::new();
    for (k, case) in OPS.iter().enumerate() {
        if !names.is_empty() && !names.iter().any(|n| n == case.name) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
        let inputs: Vec<Tensor> = (case.shapes)(opts.size).iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let probe = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            (case.build)(&tape, &vars)?.shape()
        };
        let proj = Tensor::randn(&probe, 1.0, &mut rng);
        let mut total = GradcheckReport {
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for which in 0..inputs.len() {
            let r = gradcheck(
                |tape, x| projected(tape, x, which, &inputs, case.build, &proj),
                &inputs[which],
                &GradcheckOptions::default(),
            )?;
            total.max_rel_error = total.max_rel_error.max(r.max_rel_error);
            total.checked += r.checked;
            total.skipped += r.skipped;
        }
        out.push(OpResult {
            op: case.name,
            passed: total.checked > 0 && total.max_rel_error < opts.tolerance,
            report: total,
        });
    }
    Ok(out)
}
