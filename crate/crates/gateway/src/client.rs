use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use reasonroute_core::io::{kinds, write_jsonl, Header};
use reasonroute_core::probe::{extract_yes_no, ChecklistQuestion, ProbeFlag, ProbeResult};
use reasonroute_core::ranking::{DualModeRecord, ModeOutcome, OutcomeFlag, RankedList, RankingInstance};

use crate::backend::{ChatBackend, ChatRequest, ChatResponse, Message};
use crate::config::GatewayConfig;
use crate::error::{GatewayError, Result};
use crate::parse::{estimate_tokens, parse_ranking};
use crate::prompt::{render_probe, PromptBundle, RequestMode};

/// Apply `f` to every item with at most `limit` calls in flight; results
/// keep input order.
pub fn bounded_map<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(limit.max(1)) {
        if chunk.len() == 1 {
            out.push(f(&chunk[0]));
            continue;
        }
        thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("worker panicked")));
        });
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CollectSummary {
    pub total: usize,
    /// Already complete in an earlier run.
    pub skipped: usize,
    pub completed: usize,
    /// Still incomplete (transport errors) after this run.
    pub failed: usize,
}

pub struct Gateway<B> {
    backend: B,
    config: GatewayConfig,
}

fn normalize_answer(token: &str) -> Option<bool> {
    let t = token.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
    match t.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

impl<B: ChatBackend> Gateway<B> {
    pub fn new(backend: B, config: GatewayConfig) -> Result<Self> {
        config.validate()?;
        Ok(Gateway { backend, config })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Send with bounded retries on retryable failures, doubling the delay.
    pub fn call(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let mut delay = self.config.retry_backoff_ms;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.backend.complete(req) {
                Ok(r) => return Ok(r),
                Err(e) if e.retryable && attempts <= self.config.max_retries => {
                    log::warn!("request attempt {attempts} failed: {}; retrying", e.message);
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    delay = delay.saturating_mul(2);
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        attempts,
                        message: e.message,
                    })
                }
            }
        }
    }

    pub fn ranking_request(&self, instance: &RankingInstance, mode: RequestMode) -> ChatRequest {
        let bundle = PromptBundle::new(instance, mode);
        let mut messages = vec![Message::user(bundle.prompt)];
        if let Some(p) = bundle.mode_prefix {
            messages.push(Message::assistant(p));
        }
        ChatRequest {
            messages,
            max_tokens: self.config.max_tokens,
            temperature: self.config.temperature,
            top_logprobs: None,
        }
    }

    /// One generation. Transport failures after all retries are errors; an
    /// unparseable answer is an outcome with an empty ranking and a
    /// parse-failure flag.
    pub fn rank(&self, instance: &RankingInstance, mode: RequestMode) -> Result<ModeOutcome> {
        let req = self.ranking_request(instance, mode);
        let resp = self.call(&req)?;
        let raw = format!("{}{}", req.prefill().unwrap_or(""), resp.content);
        let mut flags = Vec::new();
        let tokens = match resp.completion_tokens {
            Some(t) => t,
            None => {
                flags.push(OutcomeFlag::TokenEstimate);
                estimate_tokens(&resp.content)
            }
        };
        let (order, error) = match parse_ranking(&raw, instance.candidate_ids()) {
            Ok(p) => {
                if !p.dropped.is_empty() {
                    flags.push(OutcomeFlag::IdsDropped);
                }
                (p.ids, None)
            }
            Err(e) => {
                flags.push(OutcomeFlag::ParseFailure);
                (Vec::new(), Some(e.to_string()))
            }
        };
        Ok(ModeOutcome {
            ranking: RankedList::new(instance.id.clone(), order),
            tokens,
            raw_text: Some(raw),
            flags,
            error,
        })
    }

    fn rank_or_record(&self, instance: &RankingInstance, mode: RequestMode) -> ModeOutcome {
        self.rank(instance, mode).unwrap_or_else(|e| ModeOutcome {
            ranking: RankedList::new(instance.id.clone(), Vec::new()),
            tokens: 0,
            raw_text: None,
            flags: vec![OutcomeFlag::TransportError],
            error: Some(e.to_string()),
        })
    }

    fn probe_one(&self, prompt: &str, q: &ChecklistQuestion) -> Result<(f64, Vec<ProbeFlag>)> {
        let logprobs = self.config.supports_logprobs;
        let req = ChatRequest {
            messages: vec![Message::user(render_probe(prompt, &q.text))],
            max_tokens: 1,
            temperature: self.config.temperature,
            top_logprobs: logprobs.then_some(self.config.top_logprobs),
        };
        let resp = self.call(&req)?;
        if !logprobs {
            return Ok(match normalize_answer(&resp.content) {
                Some(true) => (1.0, vec![ProbeFlag::HardProbe]),
                Some(false) => (0.0, vec![ProbeFlag::HardProbe]),
                None => (0.5, vec![ProbeFlag::HardProbe, ProbeFlag::Uninformative]),
            });
        }
        let alts = resp.top_logprobs.unwrap_or_default();
        let find = |want: bool| {
            alts.iter()
                .find(|(t, _)| normalize_answer(t) == Some(want))
                .map(|(_, lp)| *lp)
        };
        let floor = alts.iter().map(|(_, lp)| *lp).fold(f64::INFINITY, f64::min);
        Ok(match (find(true), find(false)) {
            (Some(y), Some(n)) => (extract_yes_no(y, n)?, Vec::new()),
            (Some(y), None) => (extract_yes_no(y, floor)?, vec![ProbeFlag::PartialLogprobs]),
            (None, Some(n)) => (extract_yes_no(floor, n)?, vec![ProbeFlag::PartialLogprobs]),
            (None, None) => (0.5, vec![ProbeFlag::Uninformative]),
        })
    }

    /// One request per question; questions are independent, so they run
    /// concurrently up to the configured limit.
    pub fn probe_checklist(&self, instance: &RankingInstance, checklist: &[ChecklistQuestion]) -> Result<ProbeResult> {
        if checklist.is_empty() {
            return Err(GatewayError::Config("checklist is empty".into()));
        }
        let prompt = PromptBundle::new(instance, RequestMode::SelfSelect).prompt;
        let answers = bounded_map(checklist, self.config.max_concurrency, |q| self.probe_one(&prompt, q));
        let mut result = ProbeResult {
            instance_id: instance.id.clone(),
            p_yes: BTreeMap::new(),
            flags: BTreeMap::new(),
        };
        for (q, a) in checklist.iter().zip(answers) {
            let (p, flags) = a?;
            result.p_yes.insert(q.qid.clone(), p);
            if !flags.is_empty() {
                result.flags.insert(q.qid.clone(), flags);
            }
        }
        Ok(result)
    }

    pub fn dual_mode_record(&self, instance: &RankingInstance, self_select: bool) -> DualModeRecord {
        DualModeRecord {
            instance_id: instance.id.clone(),
            non_think: self.rank_or_record(instance, RequestMode::NonThink),
            think: self.rank_or_record(instance, RequestMode::Think),
            self_select: self_select.then(|| self.rank_or_record(instance, RequestMode::SelfSelect)),
        }
    }

    /// Run both modes for every instance and write the log to `log_path`.
    ///
    /// Finished records are appended to `<log_path>.journal` as they
    /// complete, so an interrupted run resumes where it stopped: instances
    /// with a complete record (in the journal or an earlier log) are skipped,
    /// and the last record per id wins. The final log is written atomically
    /// in input order and the journal removed.
    pub fn collect_dual_mode(
        &self,
        instances: &[RankingInstance],
        log_path: &Path,
        header: Header,
        self_select: bool,
    ) -> Result<CollectSummary> {
        let journal = journal_path(log_path);
        let mut known: HashMap<String, DualModeRecord> = HashMap::new();
        if log_path.exists() {
            for r in read_records(log_path)? {
                known.insert(r.instance_id.clone(), r);
            }
        }
        if journal.exists() {
            for r in read_records(&journal)? {
                known.insert(r.instance_id.clone(), r);
            }
        }
        let todo: Vec<&RankingInstance> = instances
            .iter()
            .filter(|i| !known.get(&i.id).is_some_and(|r| r.is_complete()))
            .collect();
        let mut summary = CollectSummary {
            total: instances.len(),
            skipped: instances.len() - todo.len(),
            ..CollectSummary::default()
        };

        let mut sink = OpenOptions::new().create(true).append(true).open(&journal)?;
        for chunk in todo.chunks(self.config.max_concurrency) {
            let records = bounded_map(chunk, chunk.len(), |i| self.dual_mode_record(i, self_select));
            for r in records {
                let mut line = serde_json::to_vec(&r)?;
                line.push(b'\n');
                sink.write_all(&line)?;
                if r.is_complete() {
                    summary.completed += 1;
                } else {
                    summary.failed += 1;
                }
                known.insert(r.instance_id.clone(), r);
            }
            sink.flush()?;
        }
        drop(sink);

        let ordered: Vec<&DualModeRecord> = instances.iter().filter_map(|i| known.get(&i.id)).collect();
        let header = Header {
            kind: kinds::DUAL_MODE_LOG.into(),
            ..header
        };
        write_jsonl(log_path, &header, &ordered)?;
        fs::remove_file(&journal)?;
        Ok(summary)
    }
}

pub fn journal_path(log_path: &Path) -> PathBuf {
    let mut p = log_path.as_os_str().to_owned();
    p.push(".journal");
    PathBuf::from(p)
}

/// Records of a log or journal; a header line is skipped and a torn final
/// line (from an interrupted append) is ignored.
fn read_records(path: &Path) -> Result<Vec<DualModeRecord>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        if serde_json::from_str::<Header>(l).is_ok() {
            continue;
        }
        match serde_json::from_str::<DualModeRecord>(l) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("{}: ignoring torn final line: {e}", path.display());
            }
            Err(e) => {
                return Err(reasonroute_core::Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                }
                .into())
            }
        }
    }
    Ok(out)
}
