//! The plant/cloud session protocol: a one-time handshake carrying the
//! encoded problem, then alternating measurement/control rounds. Every
//! message is recorded in a transcript, which is exactly the view of a
//! curious-but-honest cloud.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::Isomorphism;
use crate::instance::ProblemInstance;
use crate::mpc::{deadbeat_estimate, Condenser, KktResiduals, SolveStatus, SolverConfig};
use crate::objective::ControlObjective;
use crate::sysmodel::LiftedSystem;
use crate::wire;

fn clean(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| clean(m[(i, j)])).collect())
        .collect()
}

fn vector_row(v: &DVector<f64>) -> Vec<f64> {
    v.iter().map(|&x| clean(x)).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Parse(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// One-time handshake: the encoded system, cost, references and constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub horizon: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub x_ref: Vec<Vec<f64>>,
    pub u_ref: Vec<Vec<f64>>,
    pub constraints: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub step: usize,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub step: usize,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Handshake(Handshake),
    Measurement(Measurement),
    Control(Control),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    PlantToCloud,
    CloudToPlant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub dir: Direction,
    pub msg: Message,
}

/// Ordered record of every message exchanged in one session.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    fn record(&mut self, dir: Direction, msg: Message) {
        self.entries.push(TranscriptEntry { dir, msg });
    }

    pub fn handshake(&self) -> Option<&Handshake> {
        match self.entries.first() {
            Some(TranscriptEntry {
                msg: Message::Handshake(h),
                ..
            }) => Some(h),
            _ => None,
        }
    }

    /// Number of measurement/control rounds.
    pub fn rounds(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.msg, Message::Measurement(_)))
            .count()
    }

    /// Checks the session shape: one handshake first, then strictly
    /// alternating measurement/control pairs with increasing step numbers.
    pub fn validate_alternation(&self) -> Result<()> {
        let mut it = self.entries.iter();
        match it.next() {
            Some(TranscriptEntry {
                dir: Direction::PlantToCloud,
                msg: Message::Handshake(_),
            }) => {}
            _ => {
                return Err(Error::Protocol(
                    "transcript must start with a plant handshake".into(),
                ))
            }
        }
        let rest: Vec<_> = it.collect();
        if rest.len() % 2 != 0 {
            return Err(Error::Protocol("unmatched measurement/control pair".into()));
        }
        for (k, pair) in rest.chunks(2).enumerate() {
            match (&pair[0], &pair[1]) {
                (
                    TranscriptEntry {
                        dir: Direction::PlantToCloud,
                        msg: Message::Measurement(m),
                    },
                    TranscriptEntry {
                        dir: Direction::CloudToPlant,
                        msg: Message::Control(c),
                    },
                ) if m.step == k && c.step == k => {}
                _ => {
                    return Err(Error::Protocol(format!(
                        "round {k} is not a measurement/control pair with matching steps"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON Lines rendering, one message per line, handshake first.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&wire::canonical_json(entry)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Transcript> {
        let mut entries = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line)?);
        }
        Ok(Transcript { entries })
    }
}

/// True when two transcripts are equal after canonical rounding to 12
/// significant digits.
pub fn indistinguishable(t1: &Transcript, t2: &Transcript) -> Result<bool> {
    if t1.entries.len() != t2.entries.len() {
        return Ok(false);
    }
    for (a, b) in t1.entries.iter().zip(t2.entries.iter()) {
        if wire::comparison_json(a)? != wire::comparison_json(b)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Per-step cloud diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiag {
    pub step: usize,
    pub iterations: usize,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub estimator_flagged: bool,
}

/// Outcome of a full session: the decoded plant trajectory, the achieved
/// cost under the original objective, solver diagnostics and the transcript.
#[derive(Debug, Clone)]
pub struct SessionResult {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
    pub cost: f64,
    pub solver_diags: Vec<StepDiag>,
    pub transcript: Transcript,
}

/// The plant side of the protocol. It owns the key, keeps the encoded
/// problem, advances the (encoded) plant state and decodes the trajectory.
///
/// After construction every per-step operation is a matrix-vector product
/// with precomputed matrices; no factorizations or inversions happen during
/// execution.
pub struct PlantActor {
    original: ProblemInstance,
    key: Isomorphism,
    enc: ProblemInstance,
    enc_state: DVector<f64>,
    p_inv: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    g_inv_f: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    step: usize,
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    ys: Vec<DVector<f64>>,
}

impl PlantActor {
    pub fn new(instance: &ProblemInstance, key: &Isomorphism) -> Result<Self> {
        let (n, m, p) = instance.dims();
        if key.dims() != (n, m, p) {
            return Err(Error::Dimension(format!(
                "key over dims {:?} does not fit instance dims ({n},{m},{p})",
                key.dims()
            )));
        }
        let enc = instance.transform(key)?;
        let inv = key.inverse()?;
        let g_inv_f = inv.g() * key.f();
        let enc_state = enc.x0.clone();
        Ok(Self {
            original: instance.clone(),
            key: key.clone(),
            enc,
            enc_state,
            p_inv: inv.p().clone(),
            g_inv: inv.g().clone(),
            g_inv_f,
            s_inv: inv.s().clone(),
            step: 0,
            xs: Vec::new(),
            us: Vec::new(),
            ys: Vec::new(),
        })
    }

    /// Handshake message carrying the encoded problem.
    pub fn handshake(&self) -> Handshake {
        let sys = &self.enc.sys;
        let obj = &self.enc.objective;
        Handshake {
            n: sys.n(),
            m: sys.m(),
            p: sys.p(),
            horizon: obj.horizon(),
            a: matrix_rows(sys.a()),
            b: matrix_rows(sys.b()),
            c: matrix_rows(sys.c()),
            cost: matrix_rows(obj.cost_matrix()),
            x_ref: obj.x_ref().iter().map(vector_row).collect(),
            u_ref: obj.u_ref().iter().map(vector_row).collect(),
            constraints: matrix_rows(obj.constraints()),
        }
    }

    /// Measures the current output and encodes it for the cloud. Also logs
    /// the decoded state and output for the session record.
    pub fn measure(&mut self) -> Measurement {
        let y_enc = self.enc.sys.output(&self.enc_state);
        let mut x_dec = &self.p_inv * &self.enc_state;
        let n1 = x_dec.len();
        x_dec[n1 - 1] = 1.0;
        let mut y_dec = &self.s_inv * &y_enc;
        let p1 = y_dec.len();
        y_dec[p1 - 1] = 1.0;
        self.xs.push(x_dec);
        self.ys.push(y_dec);
        Measurement {
            step: self.step,
            y: vector_row(&y_enc),
        }
    }

    /// Decodes the received input, logs it, and advances the plant one step.
    pub fn apply(&mut self, ctrl: &Control) -> Result<()> {
        if ctrl.step != self.step {
            return Err(Error::Protocol(format!(
                "control for step {} arrived at step {}",
                ctrl.step, self.step
            )));
        }
        if ctrl.u.len() != self.enc.sys.m() {
            return Err(Error::Dimension("control input length".into()));
        }
        let u_enc = DVector::from_column_slice(&ctrl.u);
        // u = G^-1 u~ - (G^-1 F) x, using the plant's own decoded state
        let x_dec = self.xs.last().expect("apply follows measure");
        let u_dec = &self.g_inv * &u_enc - &self.g_inv_f * x_dec;
        self.us.push(u_dec);
        self.enc_state = self.enc.sys.step(&self.enc_state, &u_enc);
        self.step += 1;
        Ok(())
    }

    /// Decoded trajectory so far, with the final state appended.
    fn finish(mut self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>, ProblemInstance) {
        let mut x_final = &self.p_inv * &self.enc_state;
        let n1 = x_final.len();
        x_final[n1 - 1] = 1.0;
        self.xs.push(x_final);
        (self.xs, self.us, self.ys, self.original)
    }

    /// Re-encodes a decoded input; the inverse pair of the decode step.
    pub fn encode_input(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.key.f() * x + self.key.g() * u
    }
}

/// The cloud side: estimates the encoded state from encoded outputs and
/// solves the receding-horizon QP on the encoded problem.
pub struct CloudActor {
    sys: LiftedSystem,
    obj: ControlObjective,
    condenser: Condenser,
    cfg: SolverConfig,
    y_window: VecDeque<DVector<f64>>,
    u_window: VecDeque<DVector<f64>>,
    expected_step: usize,
    pub diags: Vec<StepDiag>,
}

impl CloudActor {
    pub fn from_handshake(h: &Handshake, cfg: &SolverConfig) -> Result<Self> {
        let a = rows_to_matrix(&h.a, "A")?;
        let b = rows_to_matrix(&h.b, "B")?;
        let c = rows_to_matrix(&h.c, "C")?;
        let sys = LiftedSystem::from_parts(a, b, c)?;
        if sys.n() != h.n || sys.m() != h.m || sys.p() != h.p {
            return Err(Error::Protocol("handshake dims disagree with matrices".into()));
        }
        let cost = rows_to_matrix(&h.cost, "cost")?;
        let x_ref: Vec<DVector<f64>> = h
            .x_ref
            .iter()
            .map(|r| DVector::from_column_slice(r))
            .collect();
        let u_ref: Vec<DVector<f64>> = h
            .u_ref
            .iter()
            .map(|r| DVector::from_column_slice(r))
            .collect();
        let constraints = if h.constraints.is_empty() {
            DMatrix::zeros(0, sys.n() + 1 + sys.m())
        } else {
            rows_to_matrix(&h.constraints, "constraints")?
        };
        let obj = ControlObjective::new(cost, x_ref, u_ref, constraints, h.horizon)?;
        let condenser = Condenser::new(&sys, &obj)?;
        Ok(Self {
            sys,
            obj,
            condenser,
            cfg: cfg.clone(),
            y_window: VecDeque::new(),
            u_window: VecDeque::new(),
            expected_step: 0,
            diags: Vec::new(),
        })
    }

    /// Consumes one measurement and produces the control reply.
    pub fn on_measurement(&mut self, msg: &Measurement) -> Result<Control> {
        if msg.step != self.expected_step {
            return Err(Error::Protocol(format!(
                "measurement for step {} arrived at step {}",
                msg.step, self.expected_step
            )));
        }
        if msg.y.len() != self.sys.p() + 1 {
            return Err(Error::Dimension("measurement length".into()));
        }
        let y = DVector::from_column_slice(&msg.y);
        self.y_window.push_back(y);
        if self.y_window.len() > self.sys.n() + 1 {
            self.y_window.pop_front();
            self.u_window.pop_front();
        }
        let ys: Vec<DVector<f64>> = self.y_window.iter().cloned().collect();
        let us: Vec<DVector<f64>> = self.u_window.iter().cloned().collect();
        let est = deadbeat_estimate(&self.sys, &ys, &us)?;
        let mut x_hat = est.x;
        let n1 = self.sys.n() + 1;
        x_hat[n1 - 1] = 1.0;
        let qp = self.condenser.qp(&x_hat)?;
        let sol = crate::mpc::solve(&qp, &self.cfg)?;
        if sol.status != SolveStatus::Solved {
            return Err(Error::Solver(format!(
                "step {}: solver returned {:?} (primal residual {:.3e})",
                msg.step, sol.status, sol.kkt.primal
            )));
        }
        let u0 = qp.input_block(&sol.u, 0);
        self.diags.push(StepDiag {
            step: msg.step,
            iterations: sol.iterations,
            status: sol.status,
            kkt: sol.kkt,
            estimator_flagged: est.flagged,
        });
        self.u_window.push_back(u0.clone());
        self.expected_step += 1;
        Ok(Control {
            step: msg.step,
            u: vector_row(&u0),
        })
    }

    pub fn horizon(&self) -> usize {
        self.obj.horizon()
    }
}

/// How the two actors talk to each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// Bind a listener on the given address, serve the session from a local
    /// thread, and connect to it over real sockets.
    TcpSpawn { addr: String },
    /// Connect to an externally running cloud service.
    TcpConnect { addr: String },
}

trait CloudLink {
    fn send_handshake(&mut self, h: &Handshake) -> Result<()>;
    fn exchange(&mut self, m: &Measurement) -> Result<Control>;
    fn into_diags(self: Box<Self>) -> Vec<StepDiag>;
}

struct InProcessLink {
    cloud: Option<CloudActor>,
    cfg: SolverConfig,
}

impl CloudLink for InProcessLink {
    fn send_handshake(&mut self, h: &Handshake) -> Result<()> {
        self.cloud = Some(CloudActor::from_handshake(h, &self.cfg)?);
        Ok(())
    }

    fn exchange(&mut self, m: &Measurement) -> Result<Control> {
        self.cloud
            .as_mut()
            .ok_or_else(|| Error::Protocol("measurement before handshake".into()))?
            .on_measurement(m)
    }

    fn into_diags(self: Box<Self>) -> Vec<StepDiag> {
        self.cloud.map(|c| c.diags).unwrap_or_default()
    }
}

struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    diags: Vec<StepDiag>,
}

impl TcpLink {
    fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        let reader = BufReader::new(stream.try_clone()?);
        let writer = BufWriter::new(stream);
        Ok(Self {
            reader,
            writer,
            diags: Vec::new(),
        })
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        wire::write_frame(&mut self.writer, &wire::canonical_json(msg)?)
    }

    fn recv(&mut self) -> Result<Message> {
        let text = wire::read_frame(&mut self.reader)?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl CloudLink for TcpLink {
    fn send_handshake(&mut self, h: &Handshake) -> Result<()> {
        self.send(&Message::Handshake(h.clone()))
    }

    fn exchange(&mut self, m: &Measurement) -> Result<Control> {
        self.send(&Message::Measurement(m.clone()))?;
        match self.recv()? {
            Message::Control(c) => Ok(c),
            other => Err(Error::Protocol(format!(
                "expected control reply, got {other:?}"
            ))),
        }
    }

    fn into_diags(self: Box<Self>) -> Vec<StepDiag> {
        self.diags
    }
}

/// Serves exactly one session on an accepted connection.
pub fn serve_connection(stream: TcpStream, cfg: &SolverConfig) -> Result<Vec<StepDiag>> {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let first = wire::read_frame(&mut reader)?;
    let Message::Handshake(h) = serde_json::from_str(&first)? else {
        return Err(Error::Protocol("session must begin with a handshake".into()));
    };
    let mut cloud = CloudActor::from_handshake(&h, cfg)?;
    loop {
        let text = match wire::read_frame(&mut reader) {
            Ok(t) => t,
            // connection closed by the plant: session complete
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let msg: Message = serde_json::from_str(&text)?;
        let Message::Measurement(m) = msg else {
            return Err(Error::Protocol("expected a measurement".into()));
        };
        let ctrl = cloud.on_measurement(&m)?;
        wire::write_frame(&mut writer, &wire::canonical_json(&Message::Control(ctrl))?)?;
    }
    Ok(cloud.diags)
}

/// Accept loop for a standalone cloud service; one thread per connection.
pub fn serve(listener: TcpListener, cfg: SolverConfig) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let cfg = cfg.clone();
        std::thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &cfg) {
                eprintln!("session error: {e}");
            }
        });
    }
    Ok(())
}

/// Runs a full session: handshake, then `steps` measurement/control rounds.
pub fn run_session(
    instance: &ProblemInstance,
    key: &Isomorphism,
    steps: usize,
    transport: &Transport,
    cfg: &SolverConfig,
) -> Result<SessionResult> {
    if steps == 0 {
        return Err(Error::Protocol("need at least one step".into()));
    }
    let mut plant = PlantActor::new(instance, key)?;
    let mut transcript = Transcript::default();

    let (mut link, server): (Box<dyn CloudLink>, Option<std::thread::JoinHandle<Result<Vec<StepDiag>>>>) =
        match transport {
            Transport::InProcess => (
                Box::new(InProcessLink {
                    cloud: None,
                    cfg: cfg.clone(),
                }),
                None,
            ),
            Transport::TcpSpawn { addr } => {
                let listener = TcpListener::bind(addr.as_str())?;
                let local = listener.local_addr()?;
                let cfg_srv = cfg.clone();
                let handle = std::thread::spawn(move || {
                    let (stream, _) = listener.accept()?;
                    serve_connection(stream, &cfg_srv)
                });
                (Box::new(TcpLink::connect(&local.to_string())?), Some(handle))
            }
            Transport::TcpConnect { addr } => (Box::new(TcpLink::connect(addr)?), None),
        };

    let handshake = plant.handshake();
    transcript.record(Direction::PlantToCloud, Message::Handshake(handshake.clone()));
    link.send_handshake(&handshake)?;

    for _ in 0..steps {
        let m = plant.measure();
        transcript.record(Direction::PlantToCloud, Message::Measurement(m.clone()));
        let ctrl = link.exchange(&m)?;
        transcript.record(Direction::CloudToPlant, Message::Control(ctrl.clone()));
        plant.apply(&ctrl)?;
    }

    // dropping the link closes the plant side, so a spawned server sees EOF
    let mut diags = link.into_diags();
    if let Some(handle) = server {
        match handle.join() {
            Ok(Ok(server_diags)) => diags = server_diags,
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err(Error::Protocol("cloud thread panicked".into())),
        }
    }

    let (xs, us, ys, original) = plant.finish();
    let cost = session_cost(&original.objective, &xs, &us)?;
    Ok(SessionResult {
        xs,
        us,
        ys,
        cost,
        solver_diags: diags,
        transcript,
    })
}

/// Tracking cost of a realized trajectory against an objective whose
/// references are horizon-relative: steps beyond the horizon reuse the final
/// reference point.
pub fn session_cost(
    obj: &ControlObjective,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
) -> Result<f64> {
    if xs.len() != us.len() + 1 {
        return Err(Error::LengthMismatch {
            expected: us.len() + 1,
            got: xs.len(),
        });
    }
    let mm = obj.cost_matrix();
    let n1 = obj.n() + 1;
    let m_in = obj.input_dim();
    let mut total = 0.0;
    for (k, u) in us.iter().enumerate() {
        let r = k.min(obj.horizon());
        let mut dev = DVector::zeros(n1 + m_in);
        dev.rows_mut(0, n1).copy_from(&(&xs[k] - &obj.x_ref()[r]));
        dev.rows_mut(n1, m_in).copy_from(&(u - &obj.u_ref()[r]));
        total += (dev.transpose() * mm * &dev)[(0, 0)];
    }
    Ok(total)
}

/// Runs the session twice: once as given, once with the pre-encoded instance
/// and the identity key. The two transcripts are what the indistinguishability
/// property compares.
pub fn replay_pair(
    instance: &ProblemInstance,
    key: &Isomorphism,
    steps: usize,
    transport: &Transport,
    cfg: &SolverConfig,
) -> Result<(Transcript, Transcript)> {
    let first = run_session(instance, key, steps, transport, cfg)?;
    let encoded = instance.transform(key)?;
    let (n, m, p) = encoded.dims();
    let identity = Isomorphism::identity(n, m, p);
    let second = run_session(&encoded, &identity, steps, transport, cfg)?;
    Ok((first.transcript, second.transcript))
}
