//! The LLM conversation: system instruction, few-shot pairs, dialogue tail and
//! the token budget that holds them together.

use std::collections::BTreeMap;
use std::sync::{OnceLock, RwLock};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const SYSTEM_TEMPLATE: &str = include_str!("../../../templates/system.txt");
pub const DEFAULT_BUDGET: usize = 6500;
pub const CONTEXT_WINDOW: usize = 8000;
pub const ERROR_PREFIX: &str = "An error has occurred: ";
pub const COMMENT_PREFIX: &str = "Comment: ";
pub const DEFAULT_COUNTER: &str = "heuristic4";

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt cannot fit the budget: {required} tokens are required but the budget is {budget}")]
    BudgetImpossible { required: usize, budget: usize },
    #[error("unknown token counter '{0}'")]
    UnknownCounter(String),
}

pub type CounterFn = fn(&str) -> usize;

/// `ceil(bytes / 4)`.
pub fn heuristic4(text: &str) -> usize {
    text.len().div_ceil(4)
}

fn registry() -> &'static RwLock<BTreeMap<String, CounterFn>> {
    static REGISTRY: OnceLock<RwLock<BTreeMap<String, CounterFn>>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<String, CounterFn> = BTreeMap::new();
        map.insert(DEFAULT_COUNTER.into(), heuristic4);
        RwLock::new(map)
    })
}

/// Makes an exact tokenizer available under `name`.
pub fn register_counter(name: &str, counter: CounterFn) {
    registry().write().expect("counter registry lock").insert(name.to_string(), counter);
}

pub fn count_tokens(text: &str, counter: &str) -> Result<usize, PromptError> {
    let f = *registry()
        .read()
        .expect("counter registry lock")
        .get(counter)
        .ok_or_else(|| PromptError::UnknownCounter(counter.to_string()))?;
    Ok(f(text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    ExampleUser,
    ExampleAssistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::ExampleUser => "example_user",
            Role::ExampleAssistant => "example_assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

/// A training program reduced to what the prompt needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub description: String,
    /// Preprocessed code, without docstring.
    pub code: String,
}

pub fn scenic_fence(code: &str) -> String {
    format!("```scenic\n{}\n```", code.trim_end())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub id: String,
    pub user: Message,
    pub assistant: Message,
}

impl ExamplePair {
    pub fn from_example(ex: &TrainingExample) -> Self {
        Self {
            id: ex.id.clone(),
            user: Message::new(Role::ExampleUser, ex.description.trim()),
            assistant: Message::new(Role::ExampleAssistant, scenic_fence(&ex.code)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Error,
    Comment,
    Assistant,
}

/// How example roles go over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleEncoding {
    /// `system` role with `name: example_user` / `example_assistant`.
    #[default]
    SystemName,
    /// Plain `user` / `assistant` roles.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptState {
    pub system: Message,
    pub pairs: Vec<ExamplePair>,
    pub tail: Vec<Message>,
    pub budget: usize,
    pub counter: String,
}

impl PromptState {
    /// Messages in prompt order.
    pub fn messages(&self) -> Vec<&Message> {
        let mut out = vec![&self.system];
        for p in &self.pairs {
            out.push(&p.user);
            out.push(&p.assistant);
        }
        out.extend(self.tail.iter());
        out
    }

    fn count(&self, m: &Message) -> Result<usize, PromptError> {
        count_tokens(&m.content, &self.counter)
    }

    fn pair_tokens(&self, p: &ExamplePair) -> Result<usize, PromptError> {
        Ok(self.count(&p.user)? + self.count(&p.assistant)?)
    }

    /// Sum of per-message counts.
    pub fn total_tokens(&self) -> Result<usize, PromptError> {
        self.messages().into_iter().map(|m| self.count(m)).sum()
    }

    pub fn pair_ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }

    /// Returns a new state with the message appended and the budget restored.
    pub fn append_feedback(&self, kind: FeedbackKind, text: &str) -> Result<PromptState, PromptError> {
        let message = match kind {
            FeedbackKind::Error => Message::new(Role::User, format!("{ERROR_PREFIX}{text}")),
            FeedbackKind::Comment => Message::new(Role::User, format!("{COMMENT_PREFIX}{text}")),
            FeedbackKind::Assistant => Message::new(Role::Assistant, text),
        };
        let mut next = self.clone();
        next.tail.push(message);
        next.trim_to_budget()
    }

    /// Drops whole example pairs oldest-first, then the oldest (user,
    /// assistant) pairs of the dialogue tail, until the prompt fits. The system
    /// message and the last user message always stay.
    pub fn trim_to_budget(&self) -> Result<PromptState, PromptError> {
        let mut next = self.clone();
        let mut total = next.total_tokens()?;
        while total > next.budget && !next.pairs.is_empty() {
            total -= next.pair_tokens(&next.pairs[0])?;
            next.pairs.remove(0);
        }
        while total > next.budget {
            let last_user = next.tail.iter().rposition(|m| m.role == Role::User);
            let removable = match last_user {
                Some(i) => i,
                None => next.tail.len(),
            };
            if removable == 0 {
                return Err(PromptError::BudgetImpossible { required: total, budget: next.budget });
            }
            let take = if removable >= 2 && next.tail[0].role == Role::User && next.tail[1].role == Role::Assistant {
                2
            } else {
                1
            };
            for m in next.tail.drain(..take).collect::<Vec<_>>() {
                total -= next.count(&m)?;
            }
        }
        Ok(next)
    }

    /// Chat-completion messages for this prompt. Deterministic.
    pub fn to_wire(&self, encoding: ExampleEncoding) -> Vec<WireMessage> {
        self.messages()
            .into_iter()
            .map(|m| {
                let (role, name) = match (m.role, encoding) {
                    (Role::ExampleUser | Role::ExampleAssistant, ExampleEncoding::SystemName) => {
                        ("system", Some(m.role.as_str().to_string()))
                    }
                    (Role::ExampleUser, ExampleEncoding::Plain) => ("user", None),
                    (Role::ExampleAssistant, ExampleEncoding::Plain) => ("assistant", None),
                    (r, _) => (r.as_str(), None),
                };
                WireMessage { role: role.to_string(), name, content: m.content.clone() }
            })
            .collect()
    }

    /// One JSON record per message, for `prompt.log`.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for m in self.messages() {
            out.push_str(&serde_json::to_string(m).expect("message serializes"));
            out.push('\n');
        }
        out
    }
}

/// Shuffles the corpus, then takes example pairs in shuffled order for as
/// long as system, pairs and description together stay within budget.
pub fn build_initial_prompt<R: Rng + ?Sized>(
    system: &str,
    corpus: &[TrainingExample],
    description: &str,
    rng: &mut R,
    budget: usize,
    counter: &str,
) -> Result<PromptState, PromptError> {
    let system = Message::new(Role::System, system);
    let user = Message::new(Role::User, description.trim());
    let base = count_tokens(&system.content, counter)? + count_tokens(&user.content, counter)?;
    if base > budget {
        return Err(PromptError::BudgetImpossible { required: base, budget });
    }
    let mut order: Vec<&TrainingExample> = corpus.iter().collect();
    order.shuffle(rng);
    let mut total = base;
    let mut pairs = Vec::new();
    for ex in order {
        let pair = ExamplePair::from_example(ex);
        let cost = count_tokens(&pair.user.content, counter)? + count_tokens(&pair.assistant.content, counter)?;
        if total + cost > budget {
            break;
        }
        total += cost;
        pairs.push(pair);
    }
    Ok(PromptState { system, pairs, tail: vec![user], budget, counter: counter.to_string() })
}
