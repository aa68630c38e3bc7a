//! Parameter containers for the toy denoiser, with a stable named-tensor
//! walk shared by the optimizer, the gradient container, and checkpoints.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::afca::AfcaWeights;
use crate::scalar::{lit, Scalar};

use super::ToyDiTConfig;

/// Borrowed view of one named parameter, rank-erased for elementwise
/// walks.
pub enum TensorRef<'a, T: Scalar> {
    V(&'a Array1<T>),
    M(&'a Array2<T>),
}

impl<'a, T: Scalar> TensorRef<'a, T> {
    pub fn as_dyn(&self) -> ArrayViewD<'_, T> {
        match self {
            TensorRef::V(a) => a.view().into_dyn(),
            TensorRef::M(a) => a.view().into_dyn(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorRef::V(a) => a.len(),
            TensorRef::M(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub enum TensorMut<'a, T: Scalar> {
    V(&'a mut Array1<T>),
    M(&'a mut Array2<T>),
}

impl<'a, T: Scalar> TensorMut<'a, T> {
    pub fn as_dyn_mut(&mut self) -> ArrayViewMutD<'_, T> {
        match self {
            TensorMut::V(a) => a.view_mut().into_dyn(),
            TensorMut::M(a) => a.view_mut().into_dyn(),
        }
    }
}

/// Per-row scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn unit(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }
}

/// Full projection set for one attention sublayer; queries come from the
/// token stream, keys and values from the (possibly identical) context.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjAttn<T: Scalar> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
}

impl<T: Scalar> ProjAttn<T> {
    fn random(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_q: gauss(d, d, rng),
            w_k: gauss(d, d, rng),
            w_v: gauss(d, d, rng),
            w_o: gauss(d, d, rng),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
        }
    }
}

/// Two-layer feed-forward with a tanh-approximated GELU between.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn<T: Scalar> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Scalar> Ffn<T> {
    fn random(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: gauss(d, d_ff, rng),
            b1: Array1::zeros(d_ff),
            w2: gauss(d_ff, d, rng),
            b2: Array1::zeros(d),
        }
    }

    fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            w1: Array2::zeros((d, d_ff)),
            b1: Array1::zeros(d_ff),
            w2: Array2::zeros((d_ff, d)),
            b2: Array1::zeros(d),
        }
    }
}

/// Maps the sinusoidal timestep embedding to the bias added to every
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMlp<T: Scalar> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Scalar> TimeMlp<T> {
    fn random(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: gauss(d, d, rng),
            b1: Array1::zeros(d),
            w2: gauss(d, d, rng),
            b2: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            w1: Array2::zeros((d, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
        }
    }
}

/// One transformer block: pre-norm, three full-projection attentions, the
/// shared audio-face attention, then the feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct BlockWeights<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub self_attn: ProjAttn<T>,
    pub text_attn: ProjAttn<T>,
    pub ref_attn: ProjAttn<T>,
    pub afca: AfcaWeights<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

/// The whole parameter set.
#[derive(Debug, Clone)]
pub struct ModelWeights<T: Scalar> {
    pub blocks: Vec<BlockWeights<T>>,
    pub time: TimeMlp<T>,
    pub ln_f: LayerNorm<T>,
    pub head_w: Array2<T>,
    pub head_b: Array1<T>,
}

fn gauss<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<T> {
    let scale = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = rng.sample(StandardNormal);
        lit::<T>(x * scale)
    })
}

impl<T: Scalar> ModelWeights<T> {
    pub fn random(config: &ToyDiTConfig, rng: &mut impl Rng) -> Self {
        let d = config.d_model;
        let d_head = d / config.heads;
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                ln1: LayerNorm::unit(d),
                self_attn: ProjAttn::random(d, rng),
                text_attn: ProjAttn::random(d, rng),
                ref_attn: ProjAttn::random(d, rng),
                afca: AfcaWeights::random(d, config.d_af, d_head, d_head, config.heads, rng)
                    .expect("validated config dims"),
                ln2: LayerNorm::unit(d),
                ffn: Ffn::random(d, config.d_ff, rng),
            })
            .collect();
        Self {
            blocks,
            time: TimeMlp::random(d, rng),
            ln_f: LayerNorm::unit(d),
            head_w: gauss(d, d, rng),
            head_b: Array1::zeros(d),
        }
    }

    /// All-zero parameters with the same shapes; also the gradient
    /// container's starting state.
    pub fn zeros(config: &ToyDiTConfig) -> Self {
        let d = config.d_model;
        let d_head = d / config.heads;
        let zero_afca = || {
            AfcaWeights::new(
                Array2::zeros((d, d_head * config.heads)),
                Array2::zeros((config.d_af, d_head * config.heads)),
                Array2::zeros((config.d_af, d_head * config.heads)),
                Array2::zeros((d_head * config.heads, d)),
                config.heads,
            )
            .expect("validated config dims")
        };
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                ln1: LayerNorm::zeros(d),
                self_attn: ProjAttn::zeros(d),
                text_attn: ProjAttn::zeros(d),
                ref_attn: ProjAttn::zeros(d),
                afca: zero_afca(),
                ln2: LayerNorm::zeros(d),
                ffn: Ffn::zeros(d, config.d_ff),
            })
            .collect();
        Self {
            blocks,
            time: TimeMlp::zeros(d),
            ln_f: LayerNorm::zeros(d),
            head_w: Array2::zeros((d, d)),
            head_b: Array1::zeros(d),
        }
    }

    /// Named views of every tensor, in a fixed order shared with
    /// [`Self::tensors_mut`]. Optimizers and checkpoints key on these
    /// names; the order is part of the contract.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_, T>)> {
        let mut out: Vec<(String, TensorRef<'_, T>)> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            out.push((format!("{p}.ln1.gamma"), TensorRef::V(&b.ln1.gamma)));
            out.push((format!("{p}.ln1.beta"), TensorRef::V(&b.ln1.beta)));
            for (tag, attn) in [
                ("self", &b.self_attn),
                ("text", &b.text_attn),
                ("ref", &b.ref_attn),
            ] {
                out.push((format!("{p}.{tag}.w_q"), TensorRef::M(&attn.w_q)));
                out.push((format!("{p}.{tag}.w_k"), TensorRef::M(&attn.w_k)));
                out.push((format!("{p}.{tag}.w_v"), TensorRef::M(&attn.w_v)));
                out.push((format!("{p}.{tag}.w_o"), TensorRef::M(&attn.w_o)));
            }
            out.push((format!("{p}.afca.w_q"), TensorRef::M(&b.afca.w_q)));
            out.push((format!("{p}.afca.w_k"), TensorRef::M(&b.afca.w_k)));
            out.push((format!("{p}.afca.w_v"), TensorRef::M(&b.afca.w_v)));
            out.push((format!("{p}.afca.w_o"), TensorRef::M(&b.afca.w_o)));
            out.push((format!("{p}.ln2.gamma"), TensorRef::V(&b.ln2.gamma)));
            out.push((format!("{p}.ln2.beta"), TensorRef::V(&b.ln2.beta)));
            out.push((format!("{p}.ffn.w1"), TensorRef::M(&b.ffn.w1)));
            out.push((format!("{p}.ffn.b1"), TensorRef::V(&b.ffn.b1)));
            out.push((format!("{p}.ffn.w2"), TensorRef::M(&b.ffn.w2)));
            out.push((format!("{p}.ffn.b2"), TensorRef::V(&b.ffn.b2)));
        }
        out.push(("time.w1".into(), TensorRef::M(&self.time.w1)));
        out.push(("time.b1".into(), TensorRef::V(&self.time.b1)));
        out.push(("time.w2".into(), TensorRef::M(&self.time.w2)));
        out.push(("time.b2".into(), TensorRef::V(&self.time.b2)));
        out.push(("final.gamma".into(), TensorRef::V(&self.ln_f.gamma)));
        out.push(("final.beta".into(), TensorRef::V(&self.ln_f.beta)));
        out.push(("head.w".into(), TensorRef::M(&self.head_w)));
        out.push(("head.b".into(), TensorRef::V(&self.head_b)));
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same names, same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_, T>)> {
        let mut out: Vec<(String, TensorMut<'_, T>)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            out.push((format!("{p}.ln1.gamma"), TensorMut::V(&mut b.ln1.gamma)));
            out.push((format!("{p}.ln1.beta"), TensorMut::V(&mut b.ln1.beta)));
            for (tag, attn) in [
                ("self", &mut b.self_attn),
                ("text", &mut b.text_attn),
                ("ref", &mut b.ref_attn),
            ] {
                out.push((format!("{p}.{tag}.w_q"), TensorMut::M(&mut attn.w_q)));
                out.push((format!("{p}.{tag}.w_k"), TensorMut::M(&mut attn.w_k)));
                out.push((format!("{p}.{tag}.w_v"), TensorMut::M(&mut attn.w_v)));
                out.push((format!("{p}.{tag}.w_o"), TensorMut::M(&mut attn.w_o)));
            }
            out.push((format!("{p}.afca.w_q"), TensorMut::M(&mut b.afca.w_q)));
            out.push((format!("{p}.afca.w_k"), TensorMut::M(&mut b.afca.w_k)));
            out.push((format!("{p}.afca.w_v"), TensorMut::M(&mut b.afca.w_v)));
            out.push((format!("{p}.afca.w_o"), TensorMut::M(&mut b.afca.w_o)));
            out.push((format!("{p}.ln2.gamma"), TensorMut::V(&mut b.ln2.gamma)));
            out.push((format!("{p}.ln2.beta"), TensorMut::V(&mut b.ln2.beta)));
            out.push((format!("{p}.ffn.w1"), TensorMut::M(&mut b.ffn.w1)));
            out.push((format!("{p}.ffn.b1"), TensorMut::V(&mut b.ffn.b1)));
            out.push((format!("{p}.ffn.w2"), TensorMut::M(&mut b.ffn.w2)));
            out.push((format!("{p}.ffn.b2"), TensorMut::V(&mut b.ffn.b2)));
        }
        out.push(("time.w1".into(), TensorMut::M(&mut self.time.w1)));
        out.push(("time.b1".into(), TensorMut::V(&mut self.time.b1)));
        out.push(("time.w2".into(), TensorMut::M(&mut self.time.w2)));
        out.push(("time.b2".into(), TensorMut::V(&mut self.time.b2)));
        out.push(("final.gamma".into(), TensorMut::V(&mut self.ln_f.gamma)));
        out.push(("final.beta".into(), TensorMut::V(&mut self.ln_f.beta)));
        out.push(("head.w".into(), TensorMut::M(&mut self.head_w)));
        out.push(("head.b".into(), TensorMut::V(&mut self.head_b)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
