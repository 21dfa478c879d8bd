//! Benchmark curation and evaluation: keyword and model-judged filtering of
//! QA samples, accuracy reports, and the retrieve-k sweep, keyword
//! leave-one-out and graph-evolution experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::KnowledgeGraph;
use crate::llm::{Gateway, LlmRequest};
use crate::prompt::{tags, Prompting};
use crate::qa::{answer, AnswerMode, Dataset, Prediction, PredictionStatus, QASample, QaContext};
use crate::sampler::SamplerConfig;

pub const DEFAULT_KEYWORDS: [&str; 7] = [
    "Aging",
    "Alzheimer",
    "Amyloid beta",
    "APOE",
    "Dementia",
    "Lipoprotein",
    "Microglia",
];

pub const DEFAULT_SWEEP_KS: [usize; 6] = [1, 3, 5, 10, 20, 30];

/// Label of the leave-one-out row evaluated on every sample.
pub const FULL_ROW: &str = "ADQA";

pub fn default_years() -> Vec<i32> {
    (2011..=2021).collect()
}

/// Applies `f` to every item on up to `limit` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..limit.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every item mapped"))
        .collect()
}

// ---------------------------------------------------------------------------
// Curation

/// Keywords matched case-insensitively as substrings of a question or its
/// options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordList(Vec<String>);

impl Default for KeywordList {
    fn default() -> Self {
        KeywordList(DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect())
    }
}

impl KeywordList {
    /// `None` when no non-blank keyword is given.
    pub fn new(keywords: impl IntoIterator<Item = impl Into<String>>) -> Option<Self> {
        let v: Vec<String> = keywords
            .into_iter()
            .map(Into::into)
            .filter(|k: &String| !k.trim().is_empty())
            .collect();
        (!v.is_empty()).then_some(KeywordList(v))
    }

    pub fn keywords(&self) -> &[String] {
        &self.0
    }

    pub fn matches(&self, sample: &QASample) -> bool {
        self.0.iter().any(|k| keyword_matches(k, sample))
    }
}

pub fn keyword_matches(keyword: &str, sample: &QASample) -> bool {
    let k = keyword.to_lowercase();
    sample.question.to_lowercase().contains(&k) || sample.options.values().any(|o| o.to_lowercase().contains(&k))
}

/// Splits samples into (matching any keyword, the rest).
pub fn keyword_filter(samples: &[QASample], keywords: &KeywordList) -> (Vec<QASample>, Vec<QASample>) {
    samples.iter().cloned().partition(|s| keywords.matches(s))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeVerdict {
    Accept,
    Reject,
    /// Neither yes nor no; treated as a rejection.
    Unclear,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub sample_id: String,
    pub verdict: JudgeVerdict,
    pub raw_response: String,
}

/// Options on one line as `a).text b).text ...`.
pub fn render_judge_options(sample: &QASample) -> String {
    sample
        .options
        .iter()
        .map(|(l, t)| format!("{}).{t}", l.to_ascii_lowercase()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn build_judge_prompt(sample: &QASample, prompting: &Prompting) -> LlmRequest {
    prompting
        .request(
            tags::JUDGE,
            &[
                ("question", &sample.question),
                ("options", &render_judge_options(sample)),
            ],
        )
        .expect("judge template slots are fixed")
}

/// Reads the leading word of a judge response.
pub fn parse_judge(text: &str) -> JudgeVerdict {
    let word: String = text
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => JudgeVerdict::Accept,
        "no" => JudgeVerdict::Reject,
        _ => JudgeVerdict::Unclear,
    }
}

/// Keeps the samples the model judges related to the disease.
pub fn llm_judge(
    candidates: &[QASample],
    gateway: &Gateway,
    prompting: &Prompting,
) -> (Vec<QASample>, Vec<JudgeOutcome>) {
    let outcomes = par_map(candidates, gateway.concurrency(), |s| {
        let (verdict, raw_response) = match gateway.complete(&build_judge_prompt(s, prompting)) {
            Ok(text) => (parse_judge(&text), text),
            Err(e) => (JudgeVerdict::Failed(e.to_string()), String::new()),
        };
        match &verdict {
            JudgeVerdict::Unclear => log::warn!("judge answer for {} is neither yes nor no", s.id),
            JudgeVerdict::Failed(e) => log::warn!("judge failed for {}: {e}", s.id),
            _ => {}
        }
        JudgeOutcome {
            sample_id: s.id.clone(),
            verdict,
            raw_response,
        }
    });
    let accepted = candidates
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| o.verdict == JudgeVerdict::Accept)
        .map(|(s, _)| s.clone())
        .collect();
    (accepted, outcomes)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Digest of the graph snapshot, settings and sample ids evaluated.
    pub fingerprint: String,
    pub snapshot_id: String,
    pub mode: AnswerMode,
    pub retrieve_k: usize,
    pub sampler: SamplerConfig,
    pub per_dataset: BTreeMap<Dataset, DatasetScore>,
    /// Unweighted mean of per-dataset accuracies; `None` when empty.
    pub macro_avg: Option<f64>,
    /// Correct over all samples; `None` when empty.
    pub micro_avg: Option<f64>,
    pub n: usize,
    pub failures: usize,
    pub unanswered: usize,
}

impl EvalReport {
    /// Folds predictions into a report. Order-independent.
    pub fn from_predictions(
        predictions: &[Prediction],
        graph: &KnowledgeGraph,
        ctx: &QaContext<'_>,
        mode: AnswerMode,
    ) -> Self {
        let mut per_dataset: BTreeMap<Dataset, DatasetScore> = BTreeMap::new();
        for p in predictions {
            let e = per_dataset.entry(p.dataset.clone()).or_insert(DatasetScore {
                n: 0,
                correct: 0,
                accuracy: 0.0,
            });
            e.n += 1;
            e.correct += usize::from(p.is_correct());
        }
        for s in per_dataset.values_mut() {
            s.accuracy = s.correct as f64 / s.n as f64;
        }
        let n = predictions.len();
        let correct: usize = per_dataset.values().map(|s| s.correct).sum();
        let macro_avg = (!per_dataset.is_empty())
            .then(|| per_dataset.values().map(|s| s.accuracy).sum::<f64>() / per_dataset.len() as f64);

        let mut ids: Vec<&str> = predictions.iter().map(|p| p.sample_id.as_str()).collect();
        ids.sort_unstable();
        let fingerprint_input = serde_json::json!({
            "snapshot_id": graph.snapshot_id(),
            "sampler": ctx.sampler,
            "retrieve_k": ctx.retrieve_k,
            "mode": mode,
            "rerank_mode": ctx.rerank_mode,
            "entities_from_options": ctx.entities_from_options,
            "min_link_similarity": ctx.min_link_similarity,
            "samples": ids,
        });
        EvalReport {
            fingerprint: hex::encode(Sha256::digest(fingerprint_input.to_string().as_bytes())),
            snapshot_id: graph.snapshot_id().to_string(),
            mode,
            retrieve_k: ctx.retrieve_k,
            sampler: ctx.sampler,
            per_dataset,
            macro_avg,
            micro_avg: (n > 0).then(|| correct as f64 / n as f64),
            n,
            failures: predictions
                .iter()
                .filter(|p| matches!(p.status, PredictionStatus::Failed(_)))
                .count(),
            unanswered: predictions.iter().filter(|p| p.predicted.is_none()).count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Answers every sample and returns predictions in input order.
pub fn predict_all(
    samples: &[QASample],
    graph: &KnowledgeGraph,
    ctx: &QaContext<'_>,
    mode: AnswerMode,
) -> Vec<Prediction> {
    par_map(samples, ctx.gateway.concurrency(), |s| answer(s, graph, ctx, mode))
}

pub fn evaluate(
    samples: &[QASample],
    graph: &KnowledgeGraph,
    ctx: &QaContext<'_>,
    mode: AnswerMode,
) -> (EvalReport, Vec<Prediction>) {
    let predictions = predict_all(samples, graph, ctx, mode);
    (
        EvalReport::from_predictions(&predictions, graph, ctx, mode),
        predictions,
    )
}

/// One DALK evaluation per `retrieve_k`, in the order given.
pub fn sweep_k(
    samples: &[QASample],
    graph: &KnowledgeGraph,
    ctx: &QaContext<'_>,
    ks: &[usize],
) -> Vec<(usize, EvalReport)> {
    ks.iter()
        .map(|&k| {
            let ctx = QaContext { retrieve_k: k, ..*ctx };
            (k, evaluate(samples, graph, &ctx, AnswerMode::Dalk).0)
        })
        .collect()
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map(|a| format!("{a:.6}")).unwrap_or_default()
}

/// `k,dataset,accuracy` with an `AVG` row per k holding the macro average.
pub fn sweep_csv(rows: &[(usize, EvalReport)]) -> String {
    let mut out = String::from("k,dataset,accuracy\n");
    for (k, r) in rows {
        for (d, s) in &r.per_dataset {
            let _ = writeln!(out, "{k},{d},{:.6}", s.accuracy);
        }
        let _ = writeln!(out, "{k},AVG,{}", fmt_acc(r.macro_avg));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LooRow {
    pub keyword: String,
    pub removed: usize,
    pub remaining: usize,
    pub report: EvalReport,
}

/// For each keyword, the report over samples not matching it, preceded by
/// the full-benchmark row. Samples are answered once and re-aggregated.
pub fn leave_one_out(
    samples: &[QASample],
    graph: &KnowledgeGraph,
    ctx: &QaContext<'_>,
    mode: AnswerMode,
    keywords: &KeywordList,
) -> Vec<LooRow> {
    let predictions = predict_all(samples, graph, ctx, mode);
    let mut rows = vec![LooRow {
        keyword: FULL_ROW.to_string(),
        removed: 0,
        remaining: samples.len(),
        report: EvalReport::from_predictions(&predictions, graph, ctx, mode),
    }];
    for k in keywords.keywords() {
        let kept: Vec<Prediction> = samples
            .iter()
            .zip(&predictions)
            .filter(|(s, _)| !keyword_matches(k, s))
            .map(|(_, p)| p.clone())
            .collect();
        rows.push(LooRow {
            keyword: k.clone(),
            removed: samples.len() - kept.len(),
            remaining: kept.len(),
            report: EvalReport::from_predictions(&kept, graph, ctx, mode),
        });
    }
    rows
}

/// `keyword,avg,pooled,removed,remaining`; empty accuracies mark rows with
/// nothing left to evaluate.
pub fn loo_csv(rows: &[LooRow]) -> String {
    let mut out = String::from("keyword,avg,pooled,removed,remaining\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.keyword,
            fmt_acc(r.report.macro_avg),
            fmt_acc(r.report.micro_avg),
            r.removed,
            r.remaining
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolutionRow {
    pub year: i32,
    pub triples: usize,
    pub report: EvalReport,
}

/// Evaluates against the graph as it stood at the end of each year.
pub fn evolution_curve(
    samples: &[QASample],
    graph: &KnowledgeGraph,
    ctx: &QaContext<'_>,
    mode: AnswerMode,
    years: &[i32],
) -> Vec<EvolutionRow> {
    years
        .iter()
        .map(|&year| {
            let snapshot = graph.snapshot_until(year);
            EvolutionRow {
                year,
                triples: snapshot.triples().len(),
                report: evaluate(samples, &snapshot, ctx, mode).0,
            }
        })
        .collect()
}

/// `year,triples,accuracy` with macro accuracy.
pub fn evolution_csv(rows: &[EvolutionRow]) -> String {
    let mut out = String::from("year,triples,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.year, r.triples, fmt_acc(r.report.macro_avg));
    }
    out
}

/// Mean whitespace-token count of the question stem per dataset.
pub fn query_length_stats(samples: &[QASample]) -> BTreeMap<Dataset, f64> {
    let mut sums: BTreeMap<Dataset, (usize, usize)> = BTreeMap::new();
    for s in samples {
        let e = sums.entry(s.dataset.clone()).or_default();
        e.0 += s.question.split_whitespace().count();
        e.1 += 1;
    }
    sums.into_iter().map(|(d, (w, n))| (d, w as f64 / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::{ExtractionMethod, Triple};
    use crate::embed::{EmbeddingCache, HashedBagEmbedder};
    use crate::llm::ScriptedMock;

    fn sample(id: &str, dataset: Dataset, question: &str, gold: char) -> QASample {
        QASample {
            id: id.into(),
            dataset,
            question: question.into(),
            options: [('A', "yes"), ('B', "no")]
                .into_iter()
                .map(|(l, t)| (l, t.to_string()))
                .collect(),
            gold,
        }
    }

    #[test]
    fn keywords() {
        let kw = KeywordList::default();
        assert!(kw.matches(&sample("1", Dataset::MedQA, "Which APOE allele?", 'A')));
        assert!(kw.matches(&sample("2", Dataset::MedQA, "Early Alzheimer's signs?", 'A')));
        assert!(kw.matches(&sample("3", Dataset::MedQA, "what about MICROGLIA", 'A')));
        assert!(!kw.matches(&sample("4", Dataset::MedQA, "Treat asthma?", 'A')));
        let mut s = sample("5", Dataset::MedQA, "Which is a cause?", 'A');
        s.options.insert('C', "Dementia with Lewy bodies".into());
        assert!(kw.matches(&s));
        assert!(KeywordList::new(Vec::<String>::new()).is_none());
        assert!(KeywordList::new([" "]).is_none());
    }

    #[test]
    fn judge_parse() {
        assert_eq!(parse_judge("Yes"), JudgeVerdict::Accept);
        assert_eq!(parse_judge(" yes, it is"), JudgeVerdict::Accept);
        assert_eq!(parse_judge("No."), JudgeVerdict::Reject);
        assert_eq!(parse_judge("maybe"), JudgeVerdict::Unclear);
        assert_eq!(parse_judge("Nope"), JudgeVerdict::Unclear);
        assert_eq!(parse_judge(""), JudgeVerdict::Unclear);
    }

    #[test]
    fn judge_prompt_layout() {
        let mut s = sample("1", Dataset::MedMCQA, "Treatable causes of dementia are ___.", 'B');
        s.options = [
            ("AD"),
            ("Hypothyroidism"),
            ("Multi-infarct dementia"),
            ("SDH"),
            ("Hydrocephalus"),
        ]
        .iter()
        .enumerate()
        .map(|(i, t)| ((b'A' + i as u8) as char, t.to_string()))
        .collect();
        let req = build_judge_prompt(&s, &Prompting::default());
        assert_eq!(
            req.user_prompt,
            "Judge whether the question below is related to Alzheimer's Disease. Please answer yes or no.\n\
             Question: Treatable causes of dementia are ___.\n\
             a).AD b).Hypothyroidism c).Multi-infarct dementia d).SDH e).Hydrocephalus\n\
             Is the question related to Alzheimer's Disease? Answer:"
        );
    }

    #[test]
    fn judge_filters_and_records_failures() {
        let gw = Gateway::scripted(
            ScriptedMock::new()
                .tagged_rule("judge", ["keep"], "Yes")
                .tagged_rule("judge", ["drop"], "No.")
                .tagged_rule("judge", ["unsure"], "maybe"),
        );
        let samples = vec![
            sample("1", Dataset::MedQA, "keep", 'A'),
            sample("2", Dataset::MedQA, "drop", 'A'),
            sample("3", Dataset::MedQA, "unsure", 'A'),
            sample("4", Dataset::MedQA, "unscripted", 'A'),
        ];
        let (accepted, outcomes) = llm_judge(&samples, &gw, &Prompting::default());
        assert_eq!(accepted.len(), 1);
        assert_eq!(accepted[0].id, "1");
        assert_eq!(outcomes[2].verdict, JudgeVerdict::Unclear);
        assert!(matches!(outcomes[3].verdict, JudgeVerdict::Failed(_)));
    }

    fn baseline_gateway() -> Gateway {
        Gateway::scripted(
            ScriptedMock::new()
                .tagged_rule("inference", ["right"], "The answer is A")
                .tagged_rule("inference", ["wrong"], "The answer is B")
                .tagged_rule("inference", ["mute"], "hmm"),
        )
    }

    fn empty_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_triples(Vec::new())
    }

    #[test]
    fn accuracy_and_macro() {
        let gw = baseline_gateway();
        let p = Prompting::default();
        let e = HashedBagEmbedder::default();
        let cache = EmbeddingCache::new();
        let ctx = QaContext::new(&gw, &p, &e, &cache);
        let g = empty_graph();
        let samples = vec![
            sample("1", Dataset::MedQA, "right", 'A'),
            sample("2", Dataset::MedQA, "right", 'A'),
            sample("3", Dataset::MedQA, "right", 'A'),
            sample("4", Dataset::MedQA, "wrong", 'A'),
        ];
        let (r, _) = evaluate(&samples, &g, &ctx, AnswerMode::Baseline);
        assert_eq!(r.per_dataset[&Dataset::MedQA].accuracy, 0.75);

        let samples = vec![
            sample("1", Dataset::MedQA, "right", 'A'),
            sample("2", Dataset::MedQA, "mute", 'A'),
            sample("3", Dataset::MMLU, "right", 'A'),
            sample("4", Dataset::MMLU, "right", 'A'),
            sample("5", Dataset::MMLU, "right", 'A'),
            sample("6", Dataset::MMLU, "right", 'A'),
        ];
        let (r, preds) = evaluate(&samples, &g, &ctx, AnswerMode::Baseline);
        assert_eq!(r.macro_avg, Some(0.75));
        assert_eq!(r.micro_avg, Some(5.0 / 6.0));
        assert_eq!(r.unanswered, 1);
        assert_eq!(r.failures, 0);

        let mut shuffled = preds.clone();
        shuffled.reverse();
        assert_eq!(
            EvalReport::from_predictions(&shuffled, &g, &ctx, AnswerMode::Baseline),
            r
        );
        let empty = EvalReport::from_predictions(&[], &g, &ctx, AnswerMode::Baseline);
        assert!(empty.is_empty());
        assert_eq!(empty.macro_avg, None);
    }

    #[test]
    fn loo_counts_and_markers() {
        let gw = baseline_gateway();
        let p = Prompting::default();
        let e = HashedBagEmbedder::default();
        let cache = EmbeddingCache::new();
        let ctx = QaContext::new(&gw, &p, &e, &cache);
        let g = empty_graph();
        let samples = vec![
            sample("1", Dataset::MedQA, "right: APOE and aging", 'A'),
            sample("2", Dataset::MedQA, "wrong: APOE", 'A'),
            sample("3", Dataset::MMLU, "right: amyloid", 'A'),
        ];
        let kw = KeywordList::new(["APOE", "zzz", "right", "wrong", "yes"]).unwrap();
        let rows = leave_one_out(&samples, &g, &ctx, AnswerMode::Baseline, &kw);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].keyword, FULL_ROW);
        assert_eq!((rows[1].removed, rows[1].remaining), (2, 1));
        assert_eq!(rows[2].report.per_dataset, rows[0].report.per_dataset);
        for r in &rows {
            assert_eq!(r.removed + r.remaining, samples.len());
        }
        assert_eq!((rows[3].removed, rows[4].removed), (2, 1));
        // "yes" is an option of every sample: nothing remains.
        assert!(rows[5].report.is_empty());
        let csv = loo_csv(&rows);
        assert_eq!(csv.lines().nth(6), Some("yes,,,3,0"));
        assert_eq!(csv.lines().nth(2), Some("APOE,1.000000,1.000000,2,1"));
        assert_eq!(gw.call_count(), 3);
    }

    #[test]
    fn evolution_monotone_and_final_matches_full() {
        let gw = baseline_gateway();
        let p = Prompting::default();
        let e = HashedBagEmbedder::default();
        let cache = EmbeddingCache::new();
        let ctx = QaContext::new(&gw, &p, &e, &cache);
        let g = KnowledgeGraph::from_triples(
            [(2012, "a", "b"), (2015, "b", "c"), (2015, "c", "d"), (2020, "d", "e")]
                .iter()
                .map(|(y, h, t)| Triple::new(h, "r", t, "d", *y, ExtractionMethod::Generative).unwrap()),
        );
        let samples = vec![sample("1", Dataset::MedQA, "right", 'A')];
        let rows = evolution_curve(&samples, &g, &ctx, AnswerMode::Baseline, &default_years());
        let counts: Vec<usize> = rows.iter().map(|r| r.triples).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(counts[0], 0);
        assert_eq!(*counts.last().unwrap(), 4);
        assert_eq!(
            rows.last().unwrap().report,
            evaluate(&samples, &g, &ctx, AnswerMode::Baseline).0
        );
        assert!(evolution_csv(&rows).starts_with("year,triples,accuracy\n2011,0,1.000000\n"));
    }

    #[test]
    fn query_lengths() {
        let s = vec![
            sample("1", Dataset::MedQA, "one two three four five", 'A'),
            sample("2", Dataset::QA4MRE, "a b", 'A'),
            sample("3", Dataset::QA4MRE, "a b c d", 'A'),
        ];
        let m = query_length_stats(&s);
        assert_eq!(m[&Dataset::MedQA], 5.0);
        assert_eq!(m[&Dataset::QA4MRE], 3.0);
        assert!(!m.contains_key(&Dataset::MMLU));
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..100).collect();
        assert_eq!(par_map(&v, 7, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(par_map(&Vec::<usize>::new(), 4, |x| *x).is_empty());
    }
}
