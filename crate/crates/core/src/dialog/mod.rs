//! Conventional and hybrid dialog. Hybrid mode sends factoid questions to the
//! QA pipeline and keeps its answer only when it tells the user something new.

mod chunker;
mod classify;

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use chunker::{extract_query_noun_phrases, LexiconChunker, NounPhrase, NounPhraseTagger, WordClass};
pub use classify::{is_question, HeuristicQuestionClassifier, QuestionClassifier, QuestionJudgment, INTERROGATIVE_CUES};

use crate::error::{KgiError, Result};
use crate::sparse::tokenize;
use crate::tasks::{Pipeline, TaskInput, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogMode {
    Conventional,
    #[default]
    Hybrid,
}

impl DialogMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conventional" => Some(DialogMode::Conventional),
            "hybrid" => Some(DialogMode::Hybrid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogSession {
    pub session_id: String,
    turns: Vec<Turn>,
    pub mode: DialogMode,
}

impl DialogSession {
    pub fn new(session_id: impl Into<String>, mode: DialogMode) -> Self {
        DialogSession {
            session_id: session_id.into(),
            turns: Vec::new(),
            mode,
        }
    }

    /// Rebuilds a session, checking that turns alternate starting with the user.
    pub fn from_turns(session_id: impl Into<String>, mode: DialogMode, turns: Vec<Turn>) -> Result<Self> {
        let mut session = DialogSession::new(session_id, mode);
        for pair in turns.chunks(2) {
            match pair {
                [u, s] if u.speaker == Speaker::User && s.speaker == Speaker::System => {
                    session.push_exchange(&u.text, &s.text)
                }
                _ => return Err(KgiError::validation("turns", "must alternate user/system starting with user")),
            }
        }
        Ok(session)
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn user_utterances(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::User)
            .map(|t| t.text.as_str())
    }

    pub fn push_exchange(&mut self, user: &str, system: &str) {
        self.turns.push(Turn {
            speaker: Speaker::User,
            text: user.to_string(),
        });
        self.turns.push(Turn {
            speaker: Speaker::System,
            text: system.to_string(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSource {
    DialogModel,
    QaModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogResponse {
    pub text: String,
    pub source: ResponseSource,
    pub evidence_pids: Vec<String>,
}

/// Text plus supporting passages from either model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelReply {
    pub text: String,
    pub evidence_pids: Vec<String>,
}

pub trait DialogModel: Send + Sync {
    fn reply(&self, history: &[Turn], utterance: &str) -> Result<ModelReply>;
}

pub trait QaPipeline: Send + Sync {
    fn answer(&self, query: &str) -> Result<ModelReply>;
}

impl DialogModel for Pipeline {
    fn reply(&self, history: &[Turn], utterance: &str) -> Result<ModelReply> {
        let mut turns: Vec<String> = history.iter().map(|t| t.text.clone()).collect();
        turns.push(utterance.to_string());
        let result = self.run_input(&TaskInput::Dialog { turns })?;
        Ok(ModelReply {
            text: result.best_answer().to_string(),
            evidence_pids: result.evidence.iter().map(|e| e.pid.clone()).collect(),
        })
    }
}

impl QaPipeline for Pipeline {
    fn answer(&self, query: &str) -> Result<ModelReply> {
        let result = self.run(TaskKind::QuestionAnswering, query)?;
        Ok(ModelReply {
            text: result.best_answer().to_string(),
            evidence_pids: result.evidence.iter().map(|e| e.pid.clone()).collect(),
        })
    }
}

/// Eligible noun phrases of the previous user utterances, oldest first and
/// each once, joined by `. ` and followed by the question verbatim.
pub fn build_qa_query<'a>(
    tagger: &dyn NounPhraseTagger,
    previous_user_utterances: impl IntoIterator<Item = &'a str>,
    question: &str,
) -> String {
    let mut seen = HashSet::new();
    let mut parts: Vec<String> = previous_user_utterances
        .into_iter()
        .flat_map(|u| extract_query_noun_phrases(tagger, u))
        .filter(|np| seen.insert(np.text.to_lowercase()))
        .map(|np| np.text)
        .collect();
    parts.push(question.to_string());
    parts.join(". ")
}

/// True when no token of `answer` occurs anywhere in `history`.
pub fn answer_is_novel<'a>(answer: &str, history: impl IntoIterator<Item = &'a str>) -> bool {
    let seen: HashSet<String> = history.into_iter().flat_map(tokenize).collect();
    tokenize(answer).iter().all(|t| !seen.contains(t))
}

/// One routing check, in the order the router performs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "snake_case")]
pub enum Gate {
    IsQuestion { passed: bool },
    EligibleNounPhrase { passed: bool },
    QaCall { query: String },
    QaFailed { error: String },
    Novelty { passed: bool },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub gates: Vec<Gate>,
}

impl RoutingTrace {
    pub fn qa_called(&self) -> bool {
        self.gates.iter().any(|g| matches!(g, Gate::QaCall { .. }))
    }
}

#[derive(Clone)]
pub struct DialogRouter {
    classifier: Arc<dyn QuestionClassifier>,
    tagger: Arc<dyn NounPhraseTagger>,
    dialog: Arc<dyn DialogModel>,
    qa: Arc<dyn QaPipeline>,
}

impl DialogRouter {
    pub fn new(dialog: Arc<dyn DialogModel>, qa: Arc<dyn QaPipeline>) -> Self {
        DialogRouter {
            classifier: Arc::new(HeuristicQuestionClassifier),
            tagger: Arc::new(LexiconChunker::default()),
            dialog,
            qa,
        }
    }

    pub fn with_classifier(mut self, classifier: Arc<dyn QuestionClassifier>) -> Self {
        self.classifier = classifier;
        self
    }

    pub fn with_tagger(mut self, tagger: Arc<dyn NounPhraseTagger>) -> Self {
        self.tagger = tagger;
        self
    }

    pub fn respond(&self, session: &mut DialogSession, utterance: &str) -> Result<DialogResponse> {
        self.respond_traced(session, utterance).map(|(r, _)| r)
    }

    /// Answers one user utterance and appends the exchange to the session.
    /// The session is unchanged when no response could be produced.
    pub fn respond_traced(&self, session: &mut DialogSession, utterance: &str) -> Result<(DialogResponse, RoutingTrace)> {
        if utterance.trim().is_empty() {
            return Err(KgiError::validation("utterance", "must be non-empty"));
        }
        let mut trace = RoutingTrace::default();
        let qa = match session.mode {
            DialogMode::Conventional => None,
            DialogMode::Hybrid => self.route_to_qa(session, utterance, &mut trace),
        };
        let response = match qa {
            Some(reply) => DialogResponse {
                text: reply.text,
                source: ResponseSource::QaModel,
                evidence_pids: reply.evidence_pids,
            },
            None => {
                let reply = self.dialog.reply(session.turns(), utterance)?;
                DialogResponse {
                    text: reply.text,
                    source: ResponseSource::DialogModel,
                    evidence_pids: reply.evidence_pids,
                }
            }
        };
        session.push_exchange(utterance, &response.text);
        Ok((response, trace))
    }

    fn route_to_qa(&self, session: &DialogSession, utterance: &str, trace: &mut RoutingTrace) -> Option<ModelReply> {
        let question = self.classifier.judge(utterance).is_question;
        trace.gates.push(Gate::IsQuestion { passed: question });
        if !question {
            return None;
        }
        let has_np = !extract_query_noun_phrases(self.tagger.as_ref(), utterance).is_empty();
        trace.gates.push(Gate::EligibleNounPhrase { passed: has_np });
        if !has_np {
            return None;
        }
        let query = build_qa_query(self.tagger.as_ref(), session.user_utterances(), utterance);
        trace.gates.push(Gate::QaCall { query: query.clone() });
        let reply = match self.qa.answer(&query) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(session = %session.session_id, error = %e, "qa pipeline failed; using dialog model");
                trace.gates.push(Gate::QaFailed { error: e.to_string() });
                return None;
            }
        };
        let history = session
            .turns()
            .iter()
            .map(|t| t.text.as_str())
            .chain(std::iter::once(utterance));
        // An empty answer says nothing, novel or not.
        let novel = !tokenize(&reply.text).is_empty() && answer_is_novel(&reply.text, history);
        trace.gates.push(Gate::Novelty { passed: novel });
        novel.then_some(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    const CONV1: [&str; 2] = [
        "I think a lot of young people are addicted to social media platforms.",
        "I sometimes check Facebook and post photos there but I don't use it very often.",
    ];
    const CONV1_Q: &str = "Do you know when was Facebook first launched?";

    struct StubQa {
        answer: String,
        calls: AtomicUsize,
        fail: bool,
    }

    impl QaPipeline for StubQa {
        fn answer(&self, _: &str) -> Result<ModelReply> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail {
                return Err(KgiError::Internal("down".into()));
            }
            Ok(ModelReply {
                text: self.answer.clone(),
                evidence_pids: vec!["Facebook::0".into()],
            })
        }
    }

    struct Echo;
    impl DialogModel for Echo {
        fn reply(&self, history: &[Turn], _: &str) -> Result<ModelReply> {
            Ok(ModelReply {
                text: format!("dialog reply {}", history.len() / 2 + 1),
                evidence_pids: vec![],
            })
        }
    }

    fn router(answer: &str, fail: bool) -> (DialogRouter, Arc<StubQa>) {
        let qa = Arc::new(StubQa {
            answer: answer.into(),
            calls: AtomicUsize::new(0),
            fail,
        });
        (DialogRouter::new(Arc::new(Echo), qa.clone()), qa)
    }

    #[test]
    fn qa_query_from_history() {
        let q = build_qa_query(&LexiconChunker::default(), CONV1, CONV1_Q);
        assert_eq!(
            q,
            "young people. social media platforms. Facebook. photos. Do you know when was Facebook first launched?"
        );
        assert_eq!(build_qa_query(&LexiconChunker::default(), [], "Who?"), "Who?");
        assert_eq!(build_qa_query(&LexiconChunker::default(), ["it is there"], "Who?"), "Who?");
    }

    #[test]
    fn novelty_examples() {
        let history = [CONV1[0], "reply", CONV1[1], "reply", CONV1_Q];
        assert!(answer_is_novel("February 4, 2004", history));
        assert!(!answer_is_novel("Facebook launch", history));
        assert!(answer_is_novel("", history));
    }

    #[test]
    fn hybrid_picks_novel_qa_answer() {
        let (r, qa) = router("February 4, 2004 .", false);
        let mut s = DialogSession::new("s", DialogMode::Hybrid);
        for u in CONV1 {
            let resp = r.respond(&mut s, u).unwrap();
            assert_eq!(resp.source, ResponseSource::DialogModel);
        }
        let (resp, trace) = r.respond_traced(&mut s, CONV1_Q).unwrap();
        assert_eq!(resp.text, "February 4, 2004 .");
        assert_eq!(resp.source, ResponseSource::QaModel);
        assert_eq!(resp.evidence_pids, ["Facebook::0"]);
        assert_eq!(qa.calls.load(Ordering::SeqCst), 1);
        assert!(matches!(trace.gates[..], [
            Gate::IsQuestion { passed: true },
            Gate::EligibleNounPhrase { passed: true },
            Gate::QaCall { .. },
            Gate::Novelty { passed: true }
        ]));
        assert_eq!(s.turns().len(), 6);
    }

    #[test]
    fn conventional_never_calls_qa() {
        let (r, qa) = router("February 4, 2004 .", false);
        let mut s = DialogSession::new("s", DialogMode::Conventional);
        for u in CONV1.into_iter().chain([CONV1_Q]) {
            let (resp, trace) = r.respond_traced(&mut s, u).unwrap();
            assert_eq!(resp.source, ResponseSource::DialogModel);
            assert!(trace.gates.is_empty());
        }
        assert_eq!(qa.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn qa_failure_falls_back() {
        let (r, _) = router("", true);
        let mut s = DialogSession::new("s", DialogMode::Hybrid);
        let (resp, trace) = r.respond_traced(&mut s, CONV1_Q).unwrap();
        assert_eq!(resp.source, ResponseSource::DialogModel);
        assert!(matches!(trace.gates.last(), Some(Gate::QaFailed { .. })));
    }

    #[test]
    fn empty_qa_answer_is_rejected() {
        let (r, _) = router(" . ", false);
        let mut s = DialogSession::new("s", DialogMode::Hybrid);
        assert_eq!(r.respond(&mut s, CONV1_Q).unwrap().source, ResponseSource::DialogModel);
    }

    #[test]
    fn session_round_trip_and_alternation() {
        let mut s = DialogSession::new("abc", DialogMode::Hybrid);
        s.push_exchange("hi", "hello");
        let json = serde_json::to_string(&s).unwrap();
        let back: DialogSession = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let rebuilt = DialogSession::from_turns("abc", DialogMode::Hybrid, s.turns().to_vec()).unwrap();
        assert_eq!(rebuilt, s);
        let bad = vec![Turn {
            speaker: Speaker::System,
            text: "x".into(),
        }];
        assert!(DialogSession::from_turns("abc", DialogMode::Hybrid, bad).is_err());
    }

    #[test]
    fn empty_utterance_leaves_session_alone() {
        let (r, _) = router("x", false);
        let mut s = DialogSession::new("s", DialogMode::Hybrid);
        assert!(r.respond(&mut s, "  ").is_err());
        assert!(s.turns().is_empty());
    }
}
