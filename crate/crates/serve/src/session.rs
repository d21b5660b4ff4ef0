//! One background thread per session runs the active-learning loop; the
//! annotator it uses publishes each batch to shared state and blocks until
//! the labels arrive through `advance`.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use dtal_core::active::{al_iteration, ALConfig, AlData, Annotator, DtalState, IterationLog, LabelRequest};
use dtal_core::model::ErModel;
use dtal_core::pipeline::EncodedDataset;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::api::{Bucket, CreateSession, LabelItem, SessionState};

/// Admits one training job at a time across all sessions.
#[derive(Debug, Default)]
pub struct TrainingGate {
    busy: Mutex<bool>,
    freed: Condvar,
}

impl TrainingGate {
    pub fn acquire(&self) {
        let mut busy = self.busy.lock().unwrap();
        while *busy {
            busy = self.freed.wait(busy).unwrap();
        }
        *busy = true;
    }

    pub fn release(&self) {
        *self.busy.lock().unwrap() = false;
        self.freed.notify_one();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "data", rename_all = "snake_case")]
pub enum Event {
    Created { session_id: String, request: CreateSession },
    Selection { iteration: usize, ids: Vec<usize> },
    Labels { iteration: usize, labels: Vec<LabelItem> },
    Advanced { iteration: usize },
    IterationComplete { log: Box<IterationLog> },
    Finished { error: Option<String> },
}

/// Append-only JSON-lines event log of one session.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    /// Opens for appending, cutting off a torn final line first.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let bytes = std::fs::read(path)?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            file.set_len(keep as u64)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    /// Writes one event and syncs it to disk before returning.
    pub fn append(&self, event: &Event) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(&line)?;
        f.sync_data()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(path: &Path) -> std::io::Result<Vec<Event>> {
        let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
        let last = lines.iter().rposition(|l| !l.trim().is_empty());
        let mut out = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => out.push(e),
                // A torn final line from a crash mid-write is dropped.
                Err(e) if Some(i) == last => warn!("{}: line {}: {e}", path.display(), i + 1),
                Err(e) => {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}: line {}: {e}", path.display(), i + 1),
                    ))
                }
            }
        }
        Ok(out)
    }
}

/// Labels recovered from a journal, re-fed to the loop on restart.
#[derive(Clone, Debug, Default)]
pub struct Replay {
    /// Advanced iterations: (iteration, selected ids, labels in id order).
    pub completed: VecDeque<(usize, Vec<usize>, Vec<bool>)>,
    /// Labels submitted for the last selection before it was advanced.
    pub pending: BTreeMap<usize, bool>,
    /// Highest iteration whose selection is already journaled.
    pub selections: usize,
    pub completions: usize,
    pub finished: bool,
}

impl Replay {
    /// Splits a journal into the creation request and the replay plan.
    pub fn from_events(events: &[Event]) -> Result<(String, CreateSession, Replay), String> {
        let Some(Event::Created { session_id, request }) = events.first() else {
            return Err("journal does not start with a created event".into());
        };
        let mut replay = Replay::default();
        let mut selected: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut labels: BTreeMap<usize, BTreeMap<usize, bool>> = BTreeMap::new();
        let mut advanced = Vec::new();
        for e in &events[1..] {
            match e {
                Event::Created { .. } => return Err("duplicate created event".into()),
                Event::Selection { iteration, ids } => {
                    selected.insert(*iteration, ids.clone());
                    replay.selections = replay.selections.max(*iteration);
                }
                Event::Labels { iteration, labels: items } => {
                    let entry = labels.entry(*iteration).or_default();
                    for item in items {
                        entry.insert(item.pair_id, item.label.is_match());
                    }
                }
                Event::Advanced { iteration } => advanced.push(*iteration),
                Event::IterationComplete { log } => replay.completions = replay.completions.max(log.iteration),
                Event::Finished { .. } => replay.finished = true,
            }
        }
        for it in advanced {
            let ids = selected.remove(&it).ok_or(format!("iteration {it} advanced without a selection"))?;
            let given = labels.remove(&it).unwrap_or_default();
            let vals = ids
                .iter()
                .map(|id| given.get(id).copied().ok_or(format!("iteration {it} advanced without a label for {id}")))
                .collect::<Result<Vec<_>, _>>()?;
            replay.completed.push_back((it, ids, vals));
        }
        if let Some((&it, _)) = selected.iter().next_back() {
            replay.pending = labels.remove(&it).unwrap_or_default();
        }
        Ok((session_id.clone(), request.clone(), replay))
    }
}

/// Raw attribute values of one pool pair, for display.
#[derive(Clone, Debug)]
pub struct PairView {
    pub left_id: String,
    pub right_id: String,
    pub left: Vec<String>,
    pub right: Vec<String>,
}

#[derive(Debug)]
pub struct Pending {
    pub request: LabelRequest,
    pub labels: BTreeMap<usize, bool>,
}

impl Pending {
    pub fn bucket(&self, id: usize) -> Bucket {
        if self.request.selection.likely_fp.contains(&id) {
            Bucket::LikelyFp
        } else {
            Bucket::LikelyFn
        }
    }

    pub fn missing(&self) -> Vec<usize> {
        self.request
            .ids
            .iter()
            .filter(|id| !self.labels.contains_key(id))
            .copied()
            .collect()
    }
}

#[derive(Debug)]
pub struct Inner {
    pub state: SessionState,
    pub pending: Option<Pending>,
    pub history: Vec<IterationLog>,
    pub human_labels: usize,
    pub error: Option<String>,
    /// Set when the loop has stopped.
    pub done: bool,
    pub final_model: Option<ErModel>,
}

/// State shared between request handlers and the session thread.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub request: CreateSession,
    pub attributes: Vec<String>,
    pub pairs: Vec<PairView>,
    pub has_gold: bool,
    inner: Mutex<Inner>,
    changed: Condvar,
    replies: Mutex<Sender<Vec<bool>>>,
    journal: Option<Journal>,
}

impl Session {
    pub fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap()
    }

    pub fn config(&self) -> &ALConfig {
        &self.request.config
    }

    pub fn journal(&self, event: &Event) -> std::io::Result<()> {
        match &self.journal {
            Some(j) => j.append(event),
            None => Ok(()),
        }
    }

    /// Blocks until `done` holds for the session state.
    pub fn wait_until(&self, done: impl Fn(&Inner) -> bool) -> MutexGuard<'_, Inner> {
        let mut g = self.lock();
        while !done(&g) {
            g = self.changed.wait(g).unwrap();
        }
        g
    }

    pub fn notify(&self) {
        self.changed.notify_all();
    }

    /// Hands the completed batch to the waiting loop.
    pub fn send_labels(&self, labels: Vec<bool>) -> Result<(), String> {
        self.replies
            .lock()
            .unwrap()
            .send(labels)
            .map_err(|_| "session loop has stopped".to_string())
    }
}

struct SessionAnnotator {
    session: Arc<Session>,
    replies: Receiver<Vec<bool>>,
    gate: Arc<TrainingGate>,
    replay: Replay,
    holding: bool,
}

impl SessionAnnotator {
    fn release(&mut self) {
        if self.holding {
            self.gate.release();
            self.holding = false;
        }
    }

    fn start_training(&mut self) {
        {
            let mut g = self.session.lock();
            g.state = SessionState::Idle;
        }
        self.session.notify();
        self.gate.acquire();
        self.holding = true;
        self.session.lock().state = SessionState::Training;
        self.session.notify();
    }
}

impl Annotator for SessionAnnotator {
    fn label(&mut self, request: &LabelRequest) -> Result<Vec<bool>, String> {
        self.release();
        if let Some((it, ids, labels)) = self.replay.completed.pop_front() {
            if it != request.iteration || ids != request.ids {
                return Err(format!("journal replay diverged at iteration {}", request.iteration));
            }
            self.session.lock().human_labels += labels.len();
            self.start_training();
            return Ok(labels);
        }
        if request.iteration > self.replay.selections {
            self.session
                .journal(&Event::Selection {
                    iteration: request.iteration,
                    ids: request.ids.clone(),
                })
                .map_err(|e| format!("journal: {e}"))?;
        }
        let restored = std::mem::take(&mut self.replay.pending);
        {
            let mut g = self.session.lock();
            g.pending = Some(Pending {
                request: request.clone(),
                labels: restored.into_iter().filter(|(id, _)| request.ids.contains(id)).collect(),
            });
            g.state = SessionState::AwaitingLabels;
        }
        self.session.notify();
        info!("session {}: iteration {} awaiting {} labels", self.session.id, request.iteration, request.ids.len());
        let labels = self
            .replies
            .recv()
            .map_err(|_| "annotation session closed".to_string())?;
        self.start_training();
        Ok(labels)
    }
}

/// Everything the loop needs, moved onto the session thread.
pub struct Runner {
    pub model: ErModel,
    pub data: EncodedDataset,
    pub gold: Option<Vec<bool>>,
}

pub fn new_session(
    id: String,
    request: CreateSession,
    attributes: Vec<String>,
    pairs: Vec<PairView>,
    has_gold: bool,
    journal: Option<Journal>,
) -> (Arc<Session>, Receiver<Vec<bool>>) {
    let (tx, rx) = channel();
    let session = Arc::new(Session {
        id,
        request,
        attributes,
        pairs,
        has_gold,
        inner: Mutex::new(Inner {
            state: SessionState::Training,
            pending: None,
            history: Vec::new(),
            human_labels: 0,
            error: None,
            done: false,
            final_model: None,
        }),
        changed: Condvar::new(),
        replies: Mutex::new(tx),
        journal,
    });
    (session, rx)
}

/// Body of the session thread.
pub fn run(session: Arc<Session>, replies: Receiver<Vec<bool>>, gate: Arc<TrainingGate>, replay: Replay, runner: Runner) {
    let Runner { mut model, data, gold } = runner;
    let cfg = session.config().clone();
    let (completions, journaled_finish) = (replay.completions, replay.finished);
    let mut annotator = SessionAnnotator {
        session: session.clone(),
        replies,
        gate,
        replay,
        holding: false,
    };
    let al_data = AlData {
        pairs: &data.train_pairs,
        gold: gold.as_deref(),
        dev: (!data.dev.is_empty()).then_some(data.dev.as_slice()),
        test: (!data.test.is_empty()).then_some(data.test.as_slice()),
    };
    let mut state = DtalState::new(0..data.train_pairs.len());
    let mut error = None;
    while state.iteration < cfg.iterations {
        let step = al_iteration(&mut state, &mut model, &mut annotator, al_data, &cfg);
        annotator.release();
        match step {
            Ok(Some(log)) => {
                if log.iteration > completions {
                    if let Err(e) = session.journal(&Event::IterationComplete { log: Box::new(log.clone()) }) {
                        error = Some(format!("journal: {e}"));
                    }
                }
                let mut g = session.lock();
                g.history.push(log);
                g.pending = None;
                drop(g);
                session.notify();
                if error.is_some() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    if let Some(e) = &error {
        warn!("session {}: {e}", session.id);
    }
    if !journaled_finish {
        if let Err(e) = session.journal(&Event::Finished { error: error.clone() }) {
            warn!("session {}: journal: {e}", session.id);
        }
    }
    let mut g = session.lock();
    g.state = SessionState::Finished;
    g.pending = None;
    g.error = error;
    g.done = true;
    g.final_model = Some(model);
    drop(g);
    session.notify();
    info!("session {} finished", session.id);
}
