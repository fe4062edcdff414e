//! Character error rate evaluation by 1-best decoding.

use crate::beam::{beam_search_nbest, BeamConfig};
use crate::error::{Error, Result};
use crate::io::Utterance;
use crate::mbr::edit_distance;
use crate::model::{Nnlm, RnntModel};
use crate::parallel::par_map;

#[derive(Debug, Clone)]
pub struct CerReport {
    /// `sum(edit distance) / sum(reference length) * 100`.
    pub cer: f64,
    /// Per utterance: id, edit distance, reference length, 1-best labels.
    pub per_utt: Vec<(String, usize, usize, Vec<usize>)>,
}

pub fn evaluate_cer(
    model: &RnntModel,
    lm: Option<&Nnlm>,
    testset: &[Utterance],
    config: &BeamConfig,
) -> Result<CerReport> {
    if testset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    type UttRow = (String, usize, usize, Vec<usize>);
    let one_best = BeamConfig { nbest: 1, ..*config };
    let results: Vec<Result<UttRow>> = par_map(testset, |utt| {
        let h = model.encode_eval(&utt.features)?;
        let nbest = beam_search_nbest(model, &h, lm, &one_best)?;
        let hyp = nbest
            .first()
            .map(|h| h.labels.clone())
            .ok_or_else(|| Error::Contract(format!("no hypothesis for {}", utt.id)))?;
        let dist = edit_distance(&hyp, &utt.labels);
        Ok((utt.id.clone(), dist, utt.labels.len(), hyp))
    });
    let mut per_utt = Vec::with_capacity(testset.len());
    let mut total_dist = 0usize;
    let mut total_ref = 0usize;
    for r in results {
        let row = r?;
        total_dist += row.1;
        total_ref += row.2;
        per_utt.push(row);
    }
    if total_ref == 0 {
        return Err(Error::Contract("test set has no reference labels".into()));
    }
    Ok(CerReport { cer: total_dist as f64 / total_ref as f64 * 100.0, per_utt })
}
