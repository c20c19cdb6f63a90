use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ForwardTape, PolicyModel};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::toyenv::{decode_prompt_target, TokenId, PROMPT_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub vocab_size: usize,
    /// Targets `1..=target_rows` get their own row; larger targets share the last row.
    pub target_rows: usize,
    /// Output positions with their own logits; later positions share the last one.
    pub positions: usize,
}

/// Logit table indexed by (target row, output position). Only reads task prompts, so it
/// cannot serve the awareness task.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularStoppingPolicy<F> {
    cfg: TabularConfig,
    table: Vec<F>,
}

pub struct TabularTape<F> {
    pub(crate) rows: Vec<Option<(usize, usize)>>,
    logits: Matrix<F>,
}

impl<F> ForwardTape<F> for TabularTape<F> {
    fn logits(&self) -> &Matrix<F> {
        &self.logits
    }
}

impl<F: Scalar> TabularStoppingPolicy<F> {
    pub fn zeros(cfg: TabularConfig) -> Result<Self> {
        if cfg.vocab_size < 2 || cfg.target_rows == 0 || cfg.positions == 0 {
            return invalid("tabular policy needs vocab >= 2 and nonzero table dimensions");
        }
        Ok(Self { cfg, table: vec![F::zero(); cfg.target_rows * cfg.positions * cfg.vocab_size] })
    }

    pub fn random<R: Rng + ?Sized>(cfg: TabularConfig, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        for x in &mut p.table {
            let z: f64 = StandardNormal.sample(rng);
            *x = F::lit(std * z);
        }
        Ok(p)
    }

    pub fn from_params(cfg: TabularConfig, params: Vec<F>) -> Result<Self> {
        let p = Self::zeros(cfg)?;
        if params.len() != p.table.len() {
            return Err(Error::Shape(format!("tabular policy expects {} parameters, got {}", p.table.len(), params.len())));
        }
        Ok(Self { cfg, table: params })
    }

    pub fn config(&self) -> TabularConfig {
        self.cfg
    }

    /// Sets every logit from `f(target_row, position, token)`.
    pub fn fill_all(&mut self, f: impl Fn(usize, usize, TokenId) -> f64) {
        let v = self.cfg.vocab_size;
        for r in 0..self.cfg.target_rows {
            for k in 0..self.cfg.positions {
                for tok in 0..v {
                    let i = self.index(r, k) + tok;
                    self.table[i] = F::lit(f(r, k, tok as TokenId));
                }
            }
        }
    }

    fn index(&self, row: usize, pos: usize) -> usize {
        (row * self.cfg.positions + pos) * self.cfg.vocab_size
    }

    fn cell(&self, target: u32, pos: usize) -> (usize, usize) {
        let row = (target as usize).min(self.cfg.target_rows) - 1;
        (row, pos.min(self.cfg.positions - 1))
    }
}

impl<F: Scalar> PolicyModel<F> for TabularStoppingPolicy<F> {
    type Tape = TabularTape<F>;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn params(&self) -> &[F] {
        &self.table
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.table
    }

    fn supports_arbitrary_context(&self) -> bool {
        false
    }

    fn max_context(&self) -> usize {
        usize::MAX
    }

    fn forward(&self, tokens: &[TokenId]) -> Result<Self::Tape> {
        let target = decode_prompt_target(tokens)
            .ok_or_else(|| Error::Unsupported("tabular policy only conditions on task prompts".into()))?;
        let v = self.cfg.vocab_size;
        let mut logits = Matrix::zeros(tokens.len(), v);
        let mut rows = vec![None; tokens.len()];
        for t in PROMPT_LEN - 1..tokens.len() {
            let cell = self.cell(target, t + 1 - PROMPT_LEN);
            let start = self.index(cell.0, cell.1);
            logits.row_mut(t).copy_from_slice(&self.table[start..start + v]);
            rows[t] = Some(cell);
        }
        Ok(TabularTape { rows, logits })
    }

    fn backward(&self, tape: &Self::Tape, dlogits: &Matrix<F>, grad: &mut [F]) -> Result<()> {
        if grad.len() != self.table.len() || dlogits.rows() != tape.rows.len() || dlogits.cols() != self.cfg.vocab_size {
            return Err(Error::Shape("tabular backward".into()));
        }
        let v = self.cfg.vocab_size;
        for (t, cell) in tape.rows.iter().enumerate() {
            if let Some((r, k)) = *cell {
                let start = self.index(r, k);
                for (g, &d) in grad[start..start + v].iter_mut().zip(dlogits.row(t)) {
                    *g += d;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyenv::{encode_prompt, I_AWARE};

    #[test]
    fn rows_follow_target_and_position() {
        let mut p = TabularStoppingPolicy::<f64>::zeros(TabularConfig { vocab_size: 3, target_rows: 2, positions: 2 }).unwrap();
        p.fill_all(|r, k, tok| (100 * r + 10 * k) as f64 + f64::from(tok));
        let mut seq = encode_prompt(5).unwrap();
        seq.extend([0, 0, 0]);
        let tape = p.forward(&seq).unwrap();
        assert_eq!(tape.logits().row(PROMPT_LEN - 1), &[100.0, 101.0, 102.0]);
        assert_eq!(tape.logits().row(PROMPT_LEN), &[110.0, 111.0, 112.0]);
        assert_eq!(tape.logits().row(PROMPT_LEN + 2), &[110.0, 111.0, 112.0]);
        assert!(p.forward(&[I_AWARE, 3]).is_err());
        assert!(!p.supports_arbitrary_context());
    }
}
