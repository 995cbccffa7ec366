//! Token error, block partitioning accuracy, evaluation reports and
//! attention-map dumps.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dsl::{self, TokenId};
use crate::model::{DecodeResult, Example, Model, ModelError, Strategy};
use crate::render::pgm_bytes;
use crate::tensor::{NnError, Scalar};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Positional mismatches plus the length difference.
pub fn token_mismatches(pred: &[TokenId], gt: &[TokenId]) -> usize {
    let same_len = pred.iter().zip(gt).filter(|(a, b)| a != b).count();
    same_len + pred.len().abs_diff(gt.len())
}

/// Mismatches divided by `max(len(pred), len(gt), 1)`.
pub fn token_error(pred: &[TokenId], gt: &[TokenId]) -> f64 {
    token_mismatches(pred, gt) as f64 / pred.len().max(gt.len()).max(1) as f64
}

/// Fraction of `(predicted, true)` block counts that agree exactly.
pub fn block_accuracy(pairs: &[(usize, usize)]) -> Result<f64, NnError> {
    if pairs.is_empty() {
        return Err(NnError::EmptyInput("block_accuracy"));
    }
    let hits = pairs.iter().filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: u64,
    pub len_pred: usize,
    pub len_gt: usize,
    pub mismatches: usize,
    pub blocks_pred: usize,
    pub blocks_gt: usize,
}

impl EvalRow {
    pub fn token_error(&self) -> f64 {
        self.mismatches as f64 / self.len_pred.max(self.len_gt).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean of the per-example token errors.
    pub token_error: f64,
    pub block_accuracy: f64,
    pub strategy: Strategy,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, strategy: Strategy) -> Result<Self, NnError> {
        let pairs: Vec<(usize, usize)> = rows.iter().map(|r| (r.blocks_pred, r.blocks_gt)).collect();
        let block_accuracy = block_accuracy(&pairs)?;
        let token_error = rows.iter().map(EvalRow::token_error).sum::<f64>() / rows.len() as f64;
        Ok(EvalReport { token_error, block_accuracy, strategy, rows })
    }

    pub fn summary(&self) -> String {
        format!("token_error={:.6}\tA_bp={:.6}", self.token_error, self.block_accuracy)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n# strategy={} examples={}\n", self.summary(), self.strategy, self.rows.len());
        out.push_str("id\tlen_pred\tlen_gt\tmismatches\ttoken_error\tblocks_pred\tblocks_gt\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\n",
                r.id,
                r.len_pred,
                r.len_gt,
                r.mismatches,
                r.token_error(),
                r.blocks_pred,
                r.blocks_gt
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
    }
}

/// Compares a decoded program with its ground truth.
pub fn score_example<F: Scalar>(id: u64, result: &DecodeResult<F>, gt: &[TokenId]) -> Result<EvalRow, MetricsError> {
    let pred = result.program_tokens();
    let blocks_gt = dsl::blockify(gt).map_err(ModelError::from)?.len();
    Ok(EvalRow {
        id,
        len_pred: pred.len(),
        len_gt: gt.len(),
        mismatches: token_mismatches(&pred, gt),
        blocks_pred: result.blocks.len(),
        blocks_gt,
    })
}

/// Decodes every example and scores it. Rows keep the input order.
pub fn evaluate(model: &Model<'_, f32>, examples: &[Example], strategy: Strategy) -> Result<EvalReport, MetricsError> {
    let one = |ex: &Example| -> Result<EvalRow, MetricsError> {
        let result = model.decode(&ex.image, strategy)?;
        score_example(ex.id, &result, &ex.tokens)
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<_> = {
        use rayon::prelude::*;
        examples.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<_> = examples.iter().map(one).collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_rows(rows, strategy)?)
}

/// Min-max scales one attention map to bytes; constant maps become 128.
pub fn attention_gray<F: Scalar>(alpha: &[F]) -> Vec<u8> {
    let vals: Vec<f64> = alpha.iter().map(|a| a.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![128; vals.len()];
    }
    vals.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes `alpha_<t>.pgm` for every decoded block; returns the paths.
pub fn dump_attention<F: Scalar>(result: &DecodeResult<F>, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, MetricsError> {
    let dir = out_dir.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| MetricsError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (rows, cols) = result.grid;
    let mut paths = Vec::with_capacity(result.alphas.len());
    for (t, alpha) in result.alphas.iter().enumerate() {
        let path = dir.join(format!("alpha_{t}.pgm"));
        fs::write(&path, pgm_bytes(cols as u32, rows as u32, &attention_gray(alpha))).map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::tokenize;
    use crate::model::Hypothesis;
    use crate::render::parse_pgm;

    fn ids(text: &str) -> Vec<TokenId> {
        tokenize(text).unwrap().into_ids()
    }

    #[test]
    fn token_error_examples() {
        assert_eq!(token_error(&[6, 7, 8], &[6, 7, 8]), 0.0);
        assert_eq!(token_error(&[6, 7, 8], &[6, 7]), 1.0 / 3.0);
        assert_eq!(token_error(&[6, 9, 8], &[6, 7, 8]), 1.0 / 3.0);
        assert_eq!(token_error(&[], &[]), 0.0);
        assert_eq!(token_error(&[], &[5, 5]), 1.0);
    }

    #[test]
    fn block_accuracy_examples() {
        assert_eq!(block_accuracy(&[(3, 3), (2, 4), (5, 5), (1, 2)]).unwrap(), 0.5);
        assert_eq!(block_accuracy(&[(2, 2), (7, 7)]).unwrap(), 1.0);
        assert!(matches!(block_accuracy(&[]), Err(NnError::EmptyInput(_))));
    }

    #[test]
    fn report_aggregates_match_rows() {
        let rows = vec![
            EvalRow { id: 0, len_pred: 10, len_gt: 10, mismatches: 0, blocks_pred: 2, blocks_gt: 2 },
            EvalRow { id: 1, len_pred: 8, len_gt: 10, mismatches: 5, blocks_pred: 1, blocks_gt: 2 },
        ];
        let r = EvalReport::from_rows(rows, Strategy::Greedy).unwrap();
        assert_eq!(r.token_error, 0.25);
        assert_eq!(r.block_accuracy, 0.5);
        let text = r.to_text();
        assert!(text.starts_with("token_error=0.250000\tA_bp=0.500000\n"));
        assert_eq!(text.lines().count(), 5);
    }

    fn result(blocks: &[&str], alphas: Vec<Vec<f64>>, grid: (usize, usize)) -> DecodeResult<f64> {
        DecodeResult {
            blocks: blocks
                .iter()
                .map(|b| Hypothesis { tokens: ids(b), score: 0.0, truncated: false })
                .collect(),
            alphas,
            vhats: Vec::new(),
            stop_probs: Vec::new(),
            grid,
        }
    }

    #[test]
    fn scores_against_ground_truth() {
        let gt = ids("stack { row { btn } row { img } }");
        let r = result(&["row { btn } BLOCK-END", "row { img } BLOCK-END"], vec![], (1, 1));
        let row = score_example(4, &r, &gt).unwrap();
        assert_eq!((row.mismatches, row.blocks_pred, row.blocks_gt), (0, 2, 2));
        let r = result(&["row { btn } BLOCK-END"], vec![], (1, 1));
        let row = score_example(4, &r, &gt).unwrap();
        assert_eq!((row.len_pred, row.len_gt, row.mismatches, row.blocks_pred), (7, 11, 5, 1));
    }

    #[test]
    fn attention_maps_scale() {
        assert_eq!(attention_gray(&[0.25f64; 4]), vec![128; 4]);
        assert_eq!(attention_gray(&[0.0, 1.0, 0.0, 0.0]), vec![0, 255, 0, 0]);
        let dir = tempfile::tempdir().unwrap();
        let r = result(&["row { btn } BLOCK-END", "row { img } BLOCK-END"], vec![vec![0.5, 0.5, 0.0], vec![0.1, 0.2, 0.7]], (1, 3));
        let paths = dump_attention(&r, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let (w, h, px) = parse_pgm(&fs::read(&paths[0]).unwrap()).unwrap();
        assert_eq!((w, h, px), (3, 1, vec![255, 255, 0]));
    }
}
