//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// `(input, element, analytic, numeric)` for the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// Folds one analytic/numeric comparison into the report.
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, opts: &GradCheckOptions) {
        let err = (analytic - numeric).abs();
        self.checked += 1;
        if !(err <= opts.atol + opts.rtol * numeric.abs()) {
            self.failures += 1;
        }
        if err > self.max_abs_err || self.worst.is_none() || err.is_nan() {
            self.max_abs_err = err;
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences, element by element.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().cloned().map(|t| tape.var(t)).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().cloned().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.record(i, e, grads[e], numeric, &opts);
        }
    }
    Ok(report)
}

/// Gradient-check case: fixed inputs and a scalar-valued function of them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
}

impl OpCase {
    pub fn run(&self, opts: GradCheckOptions) -> Result<GradCheckReport> {
        check_gradients(&self.inputs, self.f, opts)
    }
}

/// Reduces any tensor to a scalar through a fixed, non-uniform weighting so
/// every output element contributes a distinct sensitivity.
pub fn probe<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let shape = v.shape();
    let w = Tensor::from_fn(&shape, |i| ((i as f64) * 0.7 + 0.3).sin() + 0.5);
    Ok(v.mul(v.tape().constant(w))?.sum())
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values kept away from zero so kinked ops are differentiable at every
/// sample point.
fn offset_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut t = random_tensor(shape, seed);
    for x in t.data_mut() {
        *x += 0.2 * x.signum();
    }
    t
}

/// One case per differentiable operation.
pub fn standard_cases() -> Vec<OpCase> {
    use crate::tape::{attention, concat, AttentionMask, Reduction};
    let r = random_tensor;
    vec![
        OpCase {
            name: "matmul",
            inputs: vec![r(&[3, 4], 1), r(&[4, 2], 2)],
            f: |_, x| probe(x[0].matmul(x[1])?),
        },
        OpCase {
            name: "add",
            inputs: vec![r(&[2, 3], 3), r(&[2, 3], 4)],
            f: |_, x| probe(x[0].add(x[1])?),
        },
        OpCase {
            name: "add_row",
            inputs: vec![r(&[4, 3], 5), r(&[3], 6)],
            f: |_, x| probe(x[0].add_row(x[1])?),
        },
        OpCase {
            name: "sub",
            inputs: vec![r(&[2, 3], 7), r(&[2, 3], 8)],
            f: |_, x| probe(x[0].sub(x[1])?),
        },
        OpCase {
            name: "mul",
            inputs: vec![r(&[5], 9), r(&[5], 10)],
            f: |_, x| probe(x[0].mul(x[1])?),
        },
        OpCase {
            name: "scale",
            inputs: vec![r(&[2, 2], 11)],
            f: |_, x| probe(x[0].scale(-2.5)),
        },
        OpCase {
            name: "relu",
            inputs: vec![offset_tensor(&[3, 3], 12)],
            f: |_, x| probe(x[0].relu()),
        },
        OpCase {
            name: "leaky_relu",
            inputs: vec![offset_tensor(&[3, 3], 13)],
            f: |_, x| probe(x[0].leaky_relu(0.01)),
        },
        OpCase {
            name: "map_tanh",
            inputs: vec![r(&[2, 3], 40)],
            f: |_, x| probe(x[0].map(f64::tanh, |v| 1.0 - v.tanh() * v.tanh())),
        },
        OpCase {
            name: "softmax_last_axis",
            inputs: vec![r(&[2, 3, 4], 14)],
            f: |_, x| probe(x[0].softmax(2)?),
        },
        OpCase {
            name: "softmax_middle_axis",
            inputs: vec![r(&[2, 3, 4], 15)],
            f: |_, x| probe(x[0].softmax(1)?),
        },
        OpCase {
            name: "log_softmax",
            inputs: vec![r(&[3, 5], 16)],
            f: |_, x| probe(x[0].log_softmax(1)?),
        },
        OpCase {
            name: "layer_norm",
            inputs: vec![r(&[4, 6], 17), r(&[6], 18), r(&[6], 19)],
            f: |_, x| probe(x[0].layer_norm(x[1], x[2], 1e-5)?),
        },
        OpCase {
            name: "dropout",
            inputs: vec![r(&[4, 5], 20)],
            f: |_, x| {
                use rand::SeedableRng;
                let mut rng = rand::rngs::StdRng::seed_from_u64(99);
                probe(x[0].dropout(0.3, true, &mut rng)?)
            },
        },
        OpCase {
            name: "embedding_lookup",
            inputs: vec![r(&[5, 3], 21)],
            f: |_, x| probe(x[0].gather_rows(&[4, 0, 4, 2, 1, 4])?),
        },
        OpCase {
            name: "concat_rows",
            inputs: vec![r(&[2, 3], 22), r(&[1, 3], 23)],
            f: |_, x| probe(concat(&[x[0], x[1], x[0]], 0)?),
        },
        OpCase {
            name: "concat_cols",
            inputs: vec![r(&[2, 3], 24), r(&[2, 2], 25)],
            f: |_, x| probe(concat(&[x[0], x[1]], 1)?),
        },
        OpCase {
            name: "masked_fill",
            inputs: vec![r(&[2, 3], 26)],
            f: |_, x| probe(x[0].masked_fill(&[true, false, false, true, false, true], -3.0)?),
        },
        OpCase {
            name: "sum",
            inputs: vec![r(&[3, 2], 27)],
            f: |_, x| Ok(x[0].mul(x[0])?.sum()),
        },
        OpCase {
            name: "mean",
            inputs: vec![r(&[3, 2], 28)],
            f: |_, x| Ok(x[0].mul(x[0])?.mean()),
        },
        OpCase {
            name: "group_mean_rows",
            inputs: vec![r(&[6, 2], 29)],
            f: |_, x| probe(x[0].group_mean_rows(3)?),
        },
        OpCase {
            name: "reshape_transpose",
            inputs: vec![r(&[2, 6], 30)],
            f: |_, x| probe(x[0].reshape(&[3, 4])?.transpose()?),
        },
        OpCase {
            name: "slices",
            inputs: vec![r(&[4, 5], 31)],
            f: |_, x| probe(x[0].slice_cols(1, 4)?.slice_rows(1, 3)?),
        },
        OpCase {
            name: "cross_entropy",
            inputs: vec![r(&[3, 5], 32)],
            f: |_, x| x[0].cross_entropy(&[1, 4, 0], None, Reduction::Mean),
        },
        OpCase {
            name: "cross_entropy_masked",
            inputs: vec![r(&[4, 3], 33)],
            f: |_, x| x[0].cross_entropy(&[2, 0, 1, 1], Some(&[true, false, true, true]), Reduction::Sum),
        },
        OpCase {
            name: "attention",
            inputs: vec![r(&[6, 4], 34), r(&[6, 4], 35), r(&[6, 4], 36)],
            f: |_, x| {
                let structure = vec![true, true, false, true, true, true, false, true, true];
                let mask = AttentionMask::new(2, 3, structure)?
                    .with_key_valid(vec![true, true, true, false, true, true])?;
                probe(attention(x[0], x[1], x[2], 2, &mask)?)
            },
        },
        OpCase {
            name: "attention_causal",
            inputs: vec![r(&[4, 6], 37), r(&[4, 6], 38), r(&[4, 6], 39)],
            f: |_, x| probe(attention(x[0], x[1], x[2], 3, &AttentionMask::causal(1, 4))?),
        },
    ]
}
