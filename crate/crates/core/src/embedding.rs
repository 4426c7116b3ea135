//! Mask-gated combination of character and phoneme embeddings.

use rand::Rng;

use crate::frontend::MixedSequence;
use crate::model::{Bound, ModelError, ParamStore};
use crate::nn::init::truncated_normal;
use crate::nn::{Graph, NnError, Tensor, Var};

/// Character, phoneme and mask embedding tables of a shared width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub char_table: Tensor,
    pub phone_table: Tensor,
    pub mask_table: Tensor,
    pub d: usize,
}

/// Final per-position embeddings `[T × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSequence {
    pub vectors: Tensor,
}

impl EmbeddedSequence {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EmbeddingTables {
    /// Truncated-normal tables with scale `1/sqrt(v)` for each table's own
    /// vocabulary size.
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, d: usize, rng: &mut R) -> Self {
        let s = 1.0 / (vocab_size as f64).sqrt();
        Self {
            char_table: truncated_normal(&[vocab_size, d], s, rng),
            phone_table: truncated_normal(&[vocab_size, d], s, rng),
            mask_table: truncated_normal(&[2, d], 1.0 / 2f64.sqrt(), rng),
            d,
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self, ModelError> {
        let char_table = store.get("embed.char")?.clone();
        Ok(Self {
            d: char_table.cols(),
            char_table,
            phone_table: store.get("embed.phone")?.clone(),
            mask_table: store.get("embed.mask")?.clone(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.char_table.rows()
    }
}

fn check_mask(seq: &MixedSequence) -> Result<(), NnError> {
    if seq.symbols.len() != seq.mask.len() {
        return Err(NnError::ShapeMismatch("symbols and mask differ in length".into()));
    }
    match seq.mask.iter().position(|&m| m > 1) {
        Some(pos) => Err(NnError::ShapeMismatch(format!("mask value at {pos} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// `e_f[t] = mask[m_t] + (1 − m_t)·char[s_t] + m_t·phone[s_t]`.
pub fn embed_mixed(seq: &MixedSequence, tables: &EmbeddingTables) -> Result<EmbeddedSequence, NnError> {
    check_mask(seq)?;
    let d = tables.d;
    let v = tables.vocab_size();
    let mut out = Vec::with_capacity(seq.len() * d);
    for (pos, (&s, &m)) in seq.symbols.iter().zip(&seq.mask).enumerate() {
        if s >= v {
            return Err(NnError::IdOutOfRange(pos));
        }
        let table = if m == 1 { &tables.phone_table } else { &tables.char_table };
        let mask_row = tables.mask_table.row(m as usize);
        out.extend(table.row(s).iter().zip(mask_row).map(|(a, b)| a + b));
    }
    Ok(EmbeddedSequence {
        vectors: Tensor::new(vec![seq.len(), d], out)?,
    })
}

/// Tape version of [`embed_mixed`] for several sequences stacked row-wise.
pub fn embed_graph(g: &mut Graph, params: &Bound, seqs: &[&MixedSequence]) -> Result<Var, ModelError> {
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for seq in seqs {
        check_mask(seq)?;
        ids.extend_from_slice(&seq.symbols);
        mask.extend(seq.mask.iter().map(|&m| m as usize));
    }
    let char_table = params.get("embed.char")?;
    let phone_table = params.get("embed.phone")?;
    let mask_table = params.get("embed.mask")?;
    let d = g.value(char_table).cols();
    let gate = |on: bool| -> Vec<f64> {
        mask.iter()
            .flat_map(|&m| std::iter::repeat(if (m == 1) == on { 1.0 } else { 0.0 }).take(d))
            .collect()
    };
    let ec = g.embed(char_table, &ids)?;
    let ec = g.mul_const(ec, gate(false))?;
    let ep = g.embed(phone_table, &ids)?;
    let ep = g.mul_const(ep, gate(true))?;
    let ej = g.add(ec, ep)?;
    let em = g.embed(mask_table, &mask)?;
    Ok(g.add(em, ej)?)
}
