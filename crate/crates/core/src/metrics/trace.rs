use std::io::Write;

use ndarray::Array2;

use crate::data::RegionId;
use crate::error::{Error, Result};
use crate::session::SessionTranscript;

/// Per-region scores across the turns of one transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    /// Row labels, ascending.
    pub region_ids: Vec<RegionId>,
    /// `region_ids.len()` rows by one column per turn record.
    pub scores: Array2<f64>,
    pub normalized: bool,
}

impl ScoreTrace {
    pub fn steps(&self) -> usize {
        self.scores.ncols()
    }

    pub fn row(&self, id: RegionId) -> Option<Vec<f64>> {
        let i = self.region_ids.binary_search(&id).ok()?;
        Some(self.scores.row(i).to_vec())
    }

    /// Header `region_id,step_0,...`, then one row per region.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::format("score trace csv", e);
        let mut header = vec!["region_id".to_owned()];
        header.extend((0..self.steps()).map(|s| format!("step_{s}")));
        w.write_record(&header).map_err(csv_err)?;
        for (id, row) in self.region_ids.iter().zip(self.scores.rows()) {
            let mut rec = vec![id.0.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::format("score trace csv", e))
    }
}

/// Collects each turn's scores; with `normalize`, each column is min-max
/// scaled to [0, 1] and a constant column becomes all zeros.
pub fn score_trace(transcript: &SessionTranscript, normalize: bool) -> Result<ScoreTrace> {
    let first = transcript
        .turns
        .first()
        .ok_or_else(|| Error::InvalidState("transcript has no turns".into()))?;
    let mut region_ids: Vec<RegionId> = first.ranking.iter().map(|r| r.region_id).collect();
    region_ids.sort();
    let mut scores = Array2::zeros((region_ids.len(), transcript.turns.len()));
    for (col, turn) in transcript.turns.iter().enumerate() {
        if turn.ranking.len() != region_ids.len() {
            return Err(Error::InvalidState(format!("turn {} ranks a different region set", turn.turn)));
        }
        for r in &turn.ranking {
            let row = region_ids
                .binary_search(&r.region_id)
                .map_err(|_| Error::UnknownRegion(r.region_id))?;
            scores[[row, col]] = r.score;
        }
    }
    if normalize {
        for mut col in scores.columns_mut() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            col.mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
        }
    }
    Ok(ScoreTrace {
        region_ids,
        scores,
        normalized: normalize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::ScoredRegion;
    use crate::session::{Outcome, TurnRecord};

    fn transcript(columns: &[&[f64]]) -> SessionTranscript {
        let turns = columns
            .iter()
            .enumerate()
            .map(|(t, col)| TurnRecord {
                turn: t as u32,
                ranking: col
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| ScoredRegion {
                        region_id: RegionId(i as u32),
                        score: s,
                        s_pos: s,
                        s_neg: 0.0,
                    })
                    .collect(),
                presented: vec![],
                feedback: None,
                z_pos_size: 1,
                z_neg_size: t,
                rejected: vec![],
            })
            .collect();
        SessionTranscript {
            query_id: "q".into(),
            image_id: "i".into(),
            turns,
            outcome: Outcome::Unresolved,
            b_star: None,
        }
    }

    #[test]
    fn min_max_columns() {
        let t = score_trace(&transcript(&[&[1.0, 0.5, 0.0]]), true).unwrap();
        assert_eq!(t.scores.column(0).to_vec(), vec![1.0, 0.5, 0.0]);
        let t = score_trace(&transcript(&[&[0.7, 0.7, 0.7]]), true).unwrap();
        assert_eq!(t.scores.column(0).to_vec(), vec![0.0; 3]);
        let t = score_trace(&transcript(&[&[3.0, 1.0], &[2.0, 2.5]]), true).unwrap();
        assert_eq!(t.row(RegionId(1)).unwrap(), vec![0.0, 1.0]);
        let raw = score_trace(&transcript(&[&[3.0, 1.0]]), false).unwrap();
        assert_eq!(raw.row(RegionId(0)).unwrap(), vec![3.0]);
    }

    #[test]
    fn csv_layout() {
        let t = score_trace(&transcript(&[&[1.0, 0.0], &[0.25, 0.5]]), false).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "region_id,step_0,step_1\n0,1,0.25\n1,0,0.5\n");
    }

    #[test]
    fn empty_transcript() {
        assert!(score_trace(&transcript(&[]), true).is_err());
    }
}
