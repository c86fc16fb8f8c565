//! Hits@k, MRR and accuracy over grounded rankings, with per-subtask and
//! per-mode breakdowns and ablation delta tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::mapper::GroundedRanking;
use crate::prompt::PromptMode;

pub const HITS_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no results to score")]
    Empty,
    #[error("reports differ in breakdown keys: {0}")]
    MismatchedKeys(String),
}

/// Fraction of ranks within the top `k`. Absent ranks are misses.
pub fn hits_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank. Absent ranks contribute zero.
///
/// Reciprocals are summed in rank order so the result does not depend on the
/// order of `ranks` down to the last bit.
pub fn mrr(ranks: &[Option<usize>]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut present: Vec<usize> = ranks.iter().flatten().copied().collect();
    present.sort_unstable();
    let sum: f64 = present.iter().map(|r| 1.0 / *r as f64).sum();
    Ok(sum / ranks.len() as f64)
}

/// Per-question outcome persisted in `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub subtask: String,
    pub mode: PromptMode,
    pub gold: String,
    /// Raw answer extracted from the model output.
    #[serde(default)]
    pub answer_text: Option<String>,
    /// Top of the grounded ranking; may be truncated.
    pub ranking: Vec<(String, f64)>,
    pub gold_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_ranking: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_gold_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QuestionResult {
    /// True when the stored ranking agrees with the stored gold rank. A gold
    /// answer missing from a truncated ranking must rank below its length.
    pub fn rank_consistent(&self) -> bool {
        let ranking = GroundedRanking {
            entries: self.ranking.clone(),
        };
        match (ranking.rank_of(&self.gold), self.gold_rank) {
            (Some(a), Some(b)) => a == b,
            (None, Some(b)) => b > self.ranking.len(),
            (None, None) => true,
            (Some(_), None) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub n: usize,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_5: f64,
    pub hits_at_10: f64,
    pub mrr: f64,
}

impl MetricBlock {
    pub fn from_ranks(ranks: &[Option<usize>]) -> Result<Self, EvalError> {
        Ok(Self {
            n: ranks.len(),
            hits_at_1: hits_at_k(ranks, 1)?,
            hits_at_3: hits_at_k(ranks, 3)?,
            hits_at_5: hits_at_k(ranks, 5)?,
            hits_at_10: hits_at_k(ranks, 10)?,
            mrr: mrr(ranks)?,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.hits_at_1
    }

    pub fn metrics(&self) -> [(&'static str, f64); 5] {
        [
            ("hits@1", self.hits_at_1),
            ("hits@3", self.hits_at_3),
            ("hits@5", self.hits_at_5),
            ("hits@10", self.hits_at_10),
            ("mrr", self.mrr),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricBlock,
    pub accuracy: f64,
    /// Questions whose model call or grounding failed (scored as misses).
    pub failed: usize,
    pub by_subtask: BTreeMap<String, MetricBlock>,
    pub by_mode: BTreeMap<String, MetricBlock>,
    /// Implicit-relation inference over questions with a known gold relation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<MetricBlock>,
}

/// Aggregates per-question results. Order of `results` does not matter.
pub fn score_run(results: &[QuestionResult]) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let ranks: Vec<Option<usize>> = results.iter().map(|r| r.gold_rank).collect();
    let overall = MetricBlock::from_ranks(&ranks)?;

    let mut subtask: BTreeMap<String, Vec<Option<usize>>> = BTreeMap::new();
    let mut mode: BTreeMap<String, Vec<Option<usize>>> = BTreeMap::new();
    for r in results {
        subtask.entry(r.subtask.clone()).or_default().push(r.gold_rank);
        mode.entry(r.mode.name().to_string()).or_default().push(r.gold_rank);
    }
    let block_map = |m: BTreeMap<String, Vec<Option<usize>>>| {
        m.into_iter()
            .map(|(k, v)| Ok((k, MetricBlock::from_ranks(&v)?)))
            .collect::<Result<BTreeMap<_, _>, EvalError>>()
    };

    let relation_ranks: Vec<Option<usize>> = results
        .iter()
        .filter(|r| r.relation_gold.is_some())
        .map(|r| r.relation_gold_rank)
        .collect();
    let relation = if relation_ranks.is_empty() {
        None
    } else {
        Some(MetricBlock::from_ranks(&relation_ranks)?)
    };

    Ok(EvalReport {
        accuracy: overall.hits_at_1,
        overall,
        failed: results.iter().filter(|r| r.error.is_some()).count(),
        by_subtask: block_map(subtask)?,
        by_mode: block_map(mode)?,
        relation,
    })
}

impl EvalReport {
    /// `(scope, metric, value)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        let mut rows = Vec::new();
        let mut push = |scope: String, b: &MetricBlock| {
            for (m, v) in b.metrics() {
                rows.push((scope.clone(), m, v));
            }
        };
        push("overall".into(), &self.overall);
        for (k, b) in &self.by_subtask {
            push(format!("subtask:{k}"), b);
        }
        for (k, b) in &self.by_mode {
            push(format!("mode:{k}"), b);
        }
        if let Some(b) = &self.relation {
            push("relation".into(), b);
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,metric,value\n");
        for (scope, m, v) in self.rows() {
            let _ = writeln!(out, "{scope},{m},{v:.6}");
        }
        out
    }

    /// Table layout with percentages to one decimal. Hits@k beyond 1 come from
    /// the grounded ranking of a generative model and are marked as such.
    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {title}\n");
        let _ = writeln!(
            out,
            "n = {}, accuracy = {}%, failed = {}\n",
            self.overall.n,
            pct(self.accuracy),
            self.failed
        );
        let _ = writeln!(out, "| Scope | n | Hits@1/Acc | Hits@3† | Hits@5† | Hits@10† | MRR† |");
        let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|---:|");
        let mut line = |scope: &str, b: &MetricBlock| {
            let _ = writeln!(
                out,
                "| {scope} | {} | {} | {} | {} | {} | {} |",
                b.n,
                pct(b.hits_at_1),
                pct(b.hits_at_3),
                pct(b.hits_at_5),
                pct(b.hits_at_10),
                pct(b.mrr)
            );
        };
        line("overall", &self.overall);
        for (k, b) in &self.by_subtask {
            line(&format!("subtask {k}"), b);
        }
        for (k, b) in &self.by_mode {
            line(&format!("mode {k}"), b);
        }
        if let Some(b) = &self.relation {
            let _ = writeln!(out, "\n## Implicit relation inference\n");
            let _ = writeln!(out, "| n | Hits@1/Acc | Hits@3 | Hits@5 |");
            let _ = writeln!(out, "|---:|---:|---:|---:|");
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                b.n,
                pct(b.hits_at_1),
                pct(b.hits_at_3),
                pct(b.hits_at_5)
            );
        }
        let _ = writeln!(
            out,
            "\n† beyond-paper extension: derived from the similarity ranking of free-text answers."
        );
        out
    }
}

pub fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub scope: String,
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a` in percentage points.
    pub delta_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
}

/// Per-metric signed differences `b - a` in percentage points.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<DeltaTable, EvalError> {
    let ra = a.rows();
    let rb = b.rows();
    let keys = |rows: &[(String, &'static str, f64)]| rows.iter().map(|(s, m, _)| format!("{s}/{m}")).collect::<Vec<_>>();
    let (ka, kb) = (keys(&ra), keys(&rb));
    if ka != kb {
        let only_a: Vec<&String> = ka.iter().filter(|k| !kb.contains(k)).collect();
        let only_b: Vec<&String> = kb.iter().filter(|k| !ka.contains(k)).collect();
        return Err(EvalError::MismatchedKeys(format!("only in a: {only_a:?}; only in b: {only_b:?}")));
    }
    Ok(DeltaTable {
        rows: ra
            .into_iter()
            .zip(rb)
            .map(|((scope, metric, va), (_, _, vb))| DeltaRow {
                scope,
                metric: metric.to_string(),
                a: va,
                b: vb,
                delta_points: (vb - va) * 100.0,
            })
            .collect(),
    })
}

impl DeltaTable {
    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|r| r.delta_points == 0.0)
    }

    pub fn to_markdown(&self, a_name: &str, b_name: &str) -> String {
        let mut out = format!("| Scope | Metric | {a_name} | {b_name} | Δ (points) |\n|---|---|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:+.1} |",
                r.scope,
                r.metric,
                pct(r.a),
                pct(r.b),
                r.delta_points
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,metric,a,b,delta_points\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.4}", r.scope, r.metric, r.a, r.b, r.delta_points);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(id: &str, subtask: &str, rank: Option<usize>) -> QuestionResult {
        QuestionResult {
            question_id: id.into(),
            subtask: subtask.into(),
            mode: PromptMode::Qa,
            gold: "g".into(),
            answer_text: None,
            ranking: vec![],
            gold_rank: rank,
            relation_gold: None,
            relation_text: None,
            relation_ranking: None,
            relation_gold_rank: None,
            error: None,
        }
    }

    #[test]
    fn hand_counted_hits() {
        let ranks = [Some(1), Some(4), Some(11)];
        assert_eq!(hits_at_k(&[Some(1)], 1).unwrap(), 1.0);
        assert_eq!(hits_at_k(&ranks, 3).unwrap(), 1.0 / 3.0);
        assert_eq!(hits_at_k(&ranks, 10).unwrap(), 2.0 / 3.0);
        assert!(matches!(hits_at_k(&[], 1), Err(EvalError::Empty)));
    }

    #[test]
    fn hand_computed_mrr() {
        assert_eq!(mrr(&[Some(1)]).unwrap(), 1.0);
        let v = mrr(&[Some(1), Some(4), Some(11)]).unwrap();
        assert!((v - 0.446_969_696_969_697).abs() < 1e-9);
        assert_eq!(mrr(&[None, None]).unwrap(), 0.0);
    }

    #[test]
    fn relation_block() {
        let mut rs: Vec<QuestionResult> = [1, 2, 6]
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut q = result(&format!("q{i}"), "vvt", Some(1));
                q.relation_gold = Some("r".into());
                q.relation_gold_rank = Some(*r);
                q
            })
            .collect();
        rs.push(result("q9", "vvt", Some(1)));
        let rep = score_run(&rs).unwrap();
        let rel = rep.relation.unwrap();
        assert_eq!(rel.n, 3);
        assert_eq!(rel.hits_at_1, 1.0 / 3.0);
        assert_eq!(rel.hits_at_3, 2.0 / 3.0);
        assert_eq!(rel.hits_at_5, 2.0 / 3.0);
    }

    #[test]
    fn perturbed_delta() {
        let a = score_run(&[result("a", "vvt", Some(1)), result("b", "vvt", Some(2))]).unwrap();
        let mut b = a.clone();
        assert!(compare_reports(&a, &a).unwrap().is_zero());
        b.overall.mrr += 0.021;
        let d = compare_reports(&a, &b).unwrap();
        let row = d.rows.iter().find(|r| r.scope == "overall" && r.metric == "mrr").unwrap();
        assert!((row.delta_points - 2.1).abs() < 1e-9);
        let mut c = a.clone();
        c.by_subtask.insert("tvt".into(), c.overall);
        assert!(matches!(compare_reports(&a, &c), Err(EvalError::MismatchedKeys(_))));
    }

    #[test]
    fn rank_consistency() {
        let mut r = result("a", "vvt", Some(2));
        r.ranking = vec![("x".into(), 0.9), ("g".into(), 0.5)];
        assert!(r.rank_consistent());
        r.gold_rank = Some(1);
        assert!(!r.rank_consistent());
        r.ranking.truncate(1);
        r.gold_rank = Some(7);
        assert!(r.rank_consistent());
    }

    #[test]
    fn markdown_uses_one_decimal() {
        let rep = score_run(&[result("a", "vvt", Some(1)), result("b", "ttv", None), result("c", "ttv", Some(3))]).unwrap();
        let md = rep.to_markdown("run");
        assert!(md.contains("| overall | 3 | 33.3 | 66.7 | 66.7 | 66.7 | 44.4 |"));
        assert!(md.contains("beyond-paper"));
    }
}
