//! GRU recurrence, output heads, and round-flag augmentation.

use serde::{Deserialize, Serialize};

use crate::numeric::{glorot_init, BoundParams, NumericError, ParamStore, Rng, Tape, Tensor, Var};

/// GRU weights bound to a tape.
///
/// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
/// h̃ = tanh(W_c x + U_c (r ⊙ h) + b_c), h' = (1 − z) ⊙ h + z ⊙ h̃.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_c: Var,
    pub u_c: Var,
    pub b_c: Var,
}

const GATES: [&str; 3] = ["z", "r", "c"];

impl GruParams {
    /// Adds Glorot-initialised weights and zero biases under `prefix`.
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) {
        for g in GATES {
            store.insert(format!("{prefix}.w_{g}"), glorot_init(rng, hidden, input));
            store.insert(format!("{prefix}.u_{g}"), glorot_init(rng, hidden, hidden));
            store.insert(format!("{prefix}.b_{g}"), Tensor::zeros(&[hidden]));
        }
    }

    pub fn bind(bound: &BoundParams, prefix: &str) -> Result<Self, NumericError> {
        let get = |n: &str| bound.get(&format!("{prefix}.{n}"));
        Ok(Self {
            w_z: get("w_z")?,
            u_z: get("u_z")?,
            b_z: get("b_z")?,
            w_r: get("w_r")?,
            u_r: get("u_r")?,
            b_r: get("b_r")?,
            w_c: get("w_c")?,
            u_c: get("u_c")?,
            b_c: get("b_c")?,
        })
    }
}

pub fn gru_step(tape: &Tape, x: Var, h: Var, p: &GruParams) -> Result<Var, NumericError> {
    let gate = |w: Var, u: Var, b: Var, state: Var| -> Result<Var, NumericError> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, state)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z = tape.sigmoid(gate(p.w_z, p.u_z, p.b_z, h)?)?;
    let r = tape.sigmoid(gate(p.w_r, p.u_r, p.b_r, h)?)?;
    let rh = tape.mul(r, h)?;
    let candidate = tape.tanh(gate(p.w_c, p.u_c, p.b_c, rh)?)?;
    let hidden = tape.value(h).len();
    let ones = tape.constant(Tensor::filled(&[hidden], 1.0));
    let keep = tape.sub(ones, z)?;
    let kept = tape.mul(keep, h)?;
    let fresh = tape.mul(z, candidate)?;
    tape.add(kept, fresh)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softmax,
    Sigmoid,
}

/// Output layer: `heads` independent classifiers over a shared state.
///
/// Weights for all heads live in one `[heads * classes, hidden]` matrix;
/// head `k` owns rows `k * classes .. (k + 1) * classes`.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub w_o: Var,
    pub b_o: Var,
    pub heads: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl HeadParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        heads: usize,
        classes: usize,
        rng: &mut Rng,
    ) {
        assert!(heads >= 1 && classes >= 1);
        store.insert(
            format!("{prefix}.w_o"),
            glorot_init(rng, heads * classes, hidden),
        );
        store.insert(format!("{prefix}.b_o"), Tensor::zeros(&[heads * classes]));
    }

    pub fn bind(
        bound: &BoundParams,
        prefix: &str,
        heads: usize,
        classes: usize,
        activation: Activation,
    ) -> Result<Self, NumericError> {
        Ok(Self {
            w_o: bound.get(&format!("{prefix}.w_o"))?,
            b_o: bound.get(&format!("{prefix}.b_o"))?,
            heads,
            classes,
            activation,
        })
    }
}

/// Per-head output vectors `σ(W_o u + b_o)`.
pub fn head_forward(tape: &Tape, u: Var, p: &HeadParams) -> Result<Vec<Var>, NumericError> {
    let rows = tape.value(p.w_o).shape()[0];
    if rows != p.heads * p.classes {
        return Err(NumericError::ShapeMismatch {
            op: "head_forward",
            left: vec![rows],
            right: vec![p.heads, p.classes],
        });
    }
    let logits = tape.affine(p.w_o, u, p.b_o)?;
    let mut out = Vec::with_capacity(p.heads);
    for k in 0..p.heads {
        let part = if p.heads == 1 {
            logits
        } else {
            tape.slice(logits, k * p.classes, (k + 1) * p.classes)?
        };
        out.push(match p.activation {
            Activation::Softmax => tape.softmax(part)?,
            Activation::Sigmoid => tape.sigmoid(part)?,
        });
    }
    Ok(out)
}

/// Mean over heads of the per-head negative log-likelihood.
///
/// Softmax heads use `-ln p[target]`; sigmoid heads treat the target as a
/// one-hot label and sum the binary cross-entropies.
pub fn head_loss(
    tape: &Tape,
    outputs: &[Var],
    targets: &[usize],
    activation: Activation,
) -> Result<Var, NumericError> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(NumericError::ShapeMismatch {
            op: "head_loss",
            left: vec![outputs.len()],
            right: vec![targets.len()],
        });
    }
    let mut terms = Vec::with_capacity(outputs.len());
    for (&o, &t) in outputs.iter().zip(targets) {
        let term = match activation {
            Activation::Softmax => {
                let p = tape.pick(o, t)?;
                tape.log(p)?
            }
            Activation::Sigmoid => {
                let classes = tape.value(o).len();
                let mut sign = vec![-1.0; classes];
                let mut offset = vec![1.0; classes];
                sign[t] = 1.0;
                offset[t] = 0.0;
                // target entry keeps p, the others become 1 - p
                let sign = tape.constant(Tensor::vector(&sign));
                let offset = tape.constant(Tensor::vector(&offset));
                let signed = tape.mul(sign, o)?;
                let q = tape.add(signed, offset)?;
                let l = tape.log(q)?;
                tape.sum(l)?
            }
        };
        terms.push(term);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, -1.0 / targets.len() as f64)
}

/// Appends the round flag: 1.0 on the first round, 0.0 afterwards.
pub fn augment_flag(x: &Tensor, first_round: bool) -> Tensor {
    let mut v = x.to_vec();
    v.push(if first_round { 1.0 } else { 0.0 });
    Tensor::vector(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, sigmoid};

    fn gru_store(input: usize, hidden: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        GruParams::init(&mut s, "gru", input, hidden, &mut Rng::seeded(seed));
        s
    }

    #[test]
    fn zero_params_halve_state() {
        let store = gru_store(3, 4, 0).scaled(0.0);
        let tape = Tape::new();
        let p = GruParams::bind(&store.bind(&tape), "gru").unwrap();
        let x = tape.constant(Tensor::vector(&[0.7, -1.0, 2.0]));
        let h = tape.constant(Tensor::vector(&[0.4, -0.8, 1.0, 0.0]));
        let out = tape.value(gru_step(&tape, x, h, &p).unwrap());
        assert_eq!(out.data(), &[0.2, -0.4, 0.5, 0.0]);
    }

    #[test]
    fn zero_everything_stays_zero() {
        let store = gru_store(2, 3, 0).scaled(0.0);
        let tape = Tape::new();
        let p = GruParams::bind(&store.bind(&tape), "gru").unwrap();
        let x = tape.constant(Tensor::zeros(&[2]));
        let h = tape.constant(Tensor::zeros(&[3]));
        let out = tape.value(gru_step(&tape, x, h, &p).unwrap());
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    fn mv(m: &Tensor, v: &[f64]) -> Vec<f64> {
        let cols = m.shape()[1];
        m.data()
            .chunks(cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn matches_hand_evaluation() {
        let store = gru_store(3, 4, 11);
        let x = [0.5, -1.5, 0.25];
        let h = [0.1, -0.3, 0.8, -0.6];
        let g = |n: &str| store.get(&format!("gru.{n}")).unwrap().clone();
        let pre = |gate: &str, state: &[f64]| -> Vec<f64> {
            let a = mv(&g(&format!("w_{gate}")), &x);
            let b = mv(&g(&format!("u_{gate}")), state);
            let bias = g(&format!("b_{gate}"));
            (0..4).map(|i| a[i] + b[i] + bias.data()[i]).collect()
        };
        let z: Vec<f64> = pre("z", &h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = pre("r", &h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = (0..4).map(|i| r[i] * h[i]).collect();
        let c: Vec<f64> = pre("c", &rh).into_iter().map(f64::tanh).collect();
        let expected: Vec<f64> = (0..4).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();

        let tape = Tape::new();
        let p = GruParams::bind(&store.bind(&tape), "gru").unwrap();
        let xv = tape.constant(Tensor::vector(&x));
        let hv = tape.constant(Tensor::vector(&h));
        let out = tape.value(gru_step(&tape, xv, hv, &p).unwrap());
        for (a, e) in out.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let store = gru_store(3, 4, 1);
        let tape = Tape::new();
        let p = GruParams::bind(&store.bind(&tape), "gru").unwrap();
        let x = tape.constant(Tensor::zeros(&[5]));
        let h = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(
            gru_step(&tape, x, h, &p),
            Err(NumericError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gru_gradient_check() {
        let mut store = gru_store(3, 4, 5);
        store.insert("h0", Tensor::vector(&[0.2, -0.1, 0.5, -0.7]));
        let report = grad_check(
            |t: &Tape, b: &BoundParams| -> Result<Var, NumericError> {
                let p = GruParams::bind(b, "gru")?;
                let x = t.constant(Tensor::vector(&[0.3, -0.9, 1.2]));
                let h1 = gru_step(t, x, b.get("h0")?, &p)?;
                let h2 = gru_step(t, x, h1, &p)?;
                let sq = t.mul(h2, h2)?;
                t.sum(sq)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{:?}", report.max_rel_error);
    }

    fn head_store(hidden: usize, heads: usize, classes: usize) -> ParamStore {
        let mut s = ParamStore::new();
        HeadParams::init(&mut s, "head", hidden, heads, classes, &mut Rng::seeded(2));
        s
    }

    #[test]
    fn zero_head_is_uniform() {
        let store = head_store(4, 1, 5).scaled(0.0);
        let tape = Tape::new();
        let p = HeadParams::bind(&store.bind(&tape), "head", 1, 5, Activation::Softmax).unwrap();
        let u = tape.constant(Tensor::vector(&[0.3, 0.1, -0.2, 0.9]));
        let out = head_forward(&tape, u, &p).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(tape.value(out[0]).data(), &[0.2; 5]);
    }

    #[test]
    fn market_and_byte_head_layouts() {
        for (heads, classes) in [(22, 5), (1, 256)] {
            let store = head_store(16, heads, classes);
            let tape = Tape::new();
            let p = HeadParams::bind(
                &store.bind(&tape),
                "head",
                heads,
                classes,
                Activation::Softmax,
            )
            .unwrap();
            let u = tape.constant(Tensor::filled(&[16], 0.3));
            let out = head_forward(&tape, u, &p).unwrap();
            assert_eq!(out.len(), heads);
            for o in out {
                let v = tape.value(o);
                assert_eq!(v.len(), classes);
                assert!((v.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_dimension_mismatch() {
        let store = head_store(4, 2, 3);
        let tape = Tape::new();
        let p = HeadParams::bind(&store.bind(&tape), "head", 3, 3, Activation::Softmax).unwrap();
        let u = tape.constant(Tensor::zeros(&[4]));
        assert!(head_forward(&tape, u, &p).is_err());
    }

    #[test]
    fn sigmoid_head_loss_is_binary_cross_entropy() {
        let tape = Tape::new();
        let o = tape.constant(Tensor::vector(&[0.8, 0.4]));
        let l = head_loss(&tape, &[o], &[0], Activation::Sigmoid).unwrap();
        let expected = -(0.8f64.ln() + 0.6f64.ln());
        assert!((tape.scalar(l) - expected).abs() < 1e-15);
    }

    #[test]
    fn flag_channel() {
        let x = Tensor::vector(&[0.3]);
        assert_eq!(augment_flag(&x, true).data(), &[0.3, 1.0]);
        assert_eq!(augment_flag(&x, false).data(), &[0.3, 0.0]);
        for d in 1..6 {
            assert_eq!(augment_flag(&Tensor::zeros(&[d]), false).len(), d + 1);
        }
    }
}
