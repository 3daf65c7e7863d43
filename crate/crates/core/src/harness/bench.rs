//! Wall-clock latency bench for the core operations, with CSV output.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use super::{HarnessError, World};
use crate::agents::{pack_envelope, unpack_envelope, Message, QueuedMessage};
use crate::credentials::{self, LedgerView, VerifiableCredential};
use crate::crypto;
use crate::flows::{self, ConnectOptions, FlowError, MEDIATOR_ENDPOINT};
use crate::identity::{create_did, DidDocument, DidKind};
use crate::ledger::{CertificateRequest, Identity, Role};

pub const CSV_HEADER: &str = "op,iters,mean_ms,p50_ms,p95_ms,tps";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BenchOp {
    CreateDid,
    CreateVc,
    VerifyVc,
    ExchangeMessage,
    EstablishConnection,
    ReadDid,
    WriteDid,
}

impl BenchOp {
    pub const ALL: [BenchOp; 7] = [
        BenchOp::CreateDid,
        BenchOp::CreateVc,
        BenchOp::VerifyVc,
        BenchOp::ExchangeMessage,
        BenchOp::EstablishConnection,
        BenchOp::ReadDid,
        BenchOp::WriteDid,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BenchOp::CreateDid => "create_did",
            BenchOp::CreateVc => "create_vc",
            BenchOp::VerifyVc => "verify_vc",
            BenchOp::ExchangeMessage => "exchange_message",
            BenchOp::EstablishConnection => "establish_connection",
            BenchOp::ReadDid => "read_did",
            BenchOp::WriteDid => "write_did",
        }
    }

    pub fn is_ledger_op(&self) -> bool {
        matches!(self, BenchOp::ReadDid | BenchOp::WriteDid)
    }
}

impl std::str::FromStr for BenchOp {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchOp::ALL.into_iter().find(|op| op.name() == s).ok_or_else(|| HarnessError::UnknownOp(s.to_string()))
    }
}

/// Parses a comma-separated op list; an empty list means all ops.
pub fn parse_ops(list: &str) -> Result<Vec<BenchOp>, HarnessError> {
    let ops: Vec<BenchOp> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_, _>>()?;
    Ok(if ops.is_empty() { BenchOp::ALL.to_vec() } else { ops })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub op_name: String,
    pub iterations: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Committed operations per second over the whole run; ledger ops only.
    pub tps: Option<f64>,
}

impl BenchReport {
    fn failed(op: BenchOp, iterations: usize) -> Self {
        BenchReport {
            op_name: op.name().to_string(),
            iterations,
            mean_ms: f64::NAN,
            p50_ms: f64::NAN,
            p95_ms: f64::NAN,
            tps: op.is_ledger_op().then_some(f64::NAN),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.mean_ms.is_nan()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchConfig {
    pub iterations: usize,
    /// Pace ledger submissions at this rate instead of running flat out.
    pub tps_target: Option<f64>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { iterations: 10_000, tps_target: None, seed: 1 }
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(op: BenchOp, samples: &[Duration], wall: Duration) -> BenchReport {
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let mean = if ms.is_empty() { f64::NAN } else { ms.iter().sum::<f64>() / ms.len() as f64 };
    let tps = op.is_ledger_op().then(|| samples.len() as f64 / wall.as_secs_f64());
    BenchReport {
        op_name: op.name().to_string(),
        iterations: samples.len(),
        mean_ms: mean,
        p50_ms: percentile(&ms, 50.0),
        p95_ms: percentile(&ms, 95.0),
        tps,
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let tps = r.tps.map(fmt_num).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.op_name,
            r.iterations,
            fmt_num(r.mean_ms),
            fmt_num(r.p50_ms),
            fmt_num(r.p95_ms),
            tps
        );
    }
    out
}

/// Times `iterations` calls of `op_fn`, optionally paced at `tps` calls per
/// second. `prepare` runs untimed before each call.
fn measure<S>(
    op: BenchOp,
    iterations: usize,
    tps: Option<f64>,
    mut prepare: impl FnMut(usize) -> Result<S, HarnessError>,
    mut op_fn: impl FnMut(usize, S) -> Result<(), HarnessError>,
) -> Result<BenchReport, HarnessError> {
    let mut samples = Vec::with_capacity(iterations);
    let start = Instant::now();
    for i in 0..iterations {
        let input = prepare(i)?;
        if let Some(rate) = tps.filter(|r| *r > 0.0) {
            let due = Duration::from_secs_f64(i as f64 / rate);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let t0 = Instant::now();
        op_fn(i, input)?;
        samples.push(t0.elapsed());
    }
    let wall = start.elapsed();
    Ok(summarize(op, &samples, wall))
}

struct Cast {
    world: World,
}

const DOCTOR: &str = "doctor";
const PATIENT: &str = "patient";

impl Cast {
    fn new(seed: u64) -> Result<Self, HarnessError> {
        let mut world = World::new(seed);
        world.add_actor(DOCTOR, Role::Practitioner)?;
        world.add_actor(PATIENT, Role::Patient)?;
        world.onboard(DOCTOR)?;
        world.onboard(PATIENT)?;
        world.with_pair(DOCTOR, PATIENT, |svc, d, p, rng| {
            flows::connect(svc, d, p, "bench", "bench", ConnectOptions::default(), rng)
        })??;
        Ok(Cast { world })
    }

    fn sample_vc(&mut self) -> Result<VerifiableCredential, HarnessError> {
        let subject = self.world.wallet(PATIENT)?.anywise_did().cloned().expect("onboarded");
        let now = self.world.svc.clock.now();
        let World { svc, rng, wallets, .. } = &mut self.world;
        let doctor = wallets.get_mut(DOCTOR).expect("cast member");
        let vc = credentials::issue_vc(doctor, &svc.ledger, &subject, &[("drug", "ibuprofen"), ("dose", "400mg")], now, rng)
            .map_err(FlowError::from)?;
        svc.witnesses.publish(doctor.registry().expect("practitioner registry"));
        Ok(vc)
    }
}

fn authorized_writer(world: &mut World) -> Result<(Identity, DidDocument), HarnessError> {
    let svc = &world.svc;
    let key = crypto::generate_keypair(&mut world.rng);
    let now = svc.clock.now();
    let (_, doc) = create_did(DidKind::Anywise, &key, MEDIATOR_ENDPOINT, now).map_err(FlowError::from)?;
    let csr = CertificateRequest::new(&key, &doc, Role::Patient.as_str(), &format!("bench:{}", doc.did)).map_err(FlowError::from)?;
    let cert = svc.ca.ca_issue_certificate(&csr, now).map_err(FlowError::from)?;
    let auth = svc.msp.msp_authorize(&cert, now).map_err(FlowError::from)?;
    Ok((auth.identity, doc))
}

fn run_op(op: BenchOp, config: &BenchConfig) -> Result<BenchReport, HarnessError> {
    let n = config.iterations;
    let tps = config.tps_target;
    let mut cast = Cast::new(config.seed)?;
    match op {
        BenchOp::CreateDid => measure(op, n, tps, |_| Ok(()), |_, ()| {
            let key = crypto::generate_keypair(&mut cast.world.rng);
            create_did(DidKind::Anywise, &key, MEDIATOR_ENDPOINT, cast.world.svc.clock.now()).map_err(FlowError::from)?;
            Ok(())
        }),
        BenchOp::CreateVc => {
            let subject = cast.world.wallet(PATIENT)?.anywise_did().cloned().expect("onboarded");
            let World { svc, rng, wallets, .. } = &mut cast.world;
            let doctor = wallets.get_mut(DOCTOR).expect("cast member");
            measure(op, n, tps, |_| Ok(()), |i, ()| {
                let serial = i.to_string();
                credentials::issue_vc(doctor, &svc.ledger, &subject, &[("drug", "ibuprofen"), ("serial", &serial)], svc.clock.now(), rng)
                    .map_err(FlowError::from)?;
                Ok(())
            })
        }
        BenchOp::VerifyVc => {
            let vc = cast.sample_vc()?;
            let svc = &cast.world.svc;
            measure(op, n, tps, |_| Ok(()), |_, ()| {
                let report = credentials::verify_vc(&vc, LedgerView { ledger: &svc.ledger, witnesses: &svc.witnesses });
                if report.is_valid() {
                    Ok(())
                } else {
                    Err(FlowError::CredentialRejected(report).into())
                }
            })
        }
        BenchOp::ExchangeMessage => {
            let World { svc, rng, wallets, .. } = &mut cast.world;
            let mut doctor = wallets.remove(DOCTOR).expect("cast member");
            let mut patient = wallets.remove(PATIENT).expect("cast member");
            let to = patient.connection("bench").expect("connected").my_pairwise.clone();
            let body = Message::Text { body: "How are you feeling today?".into() };
            measure(op, n, tps, |_| Ok(()), |_, ()| {
                let env = pack_envelope(&mut doctor, "bench", &body, rng).map_err(FlowError::from)?;
                svc.mediator.deliver(env).map_err(FlowError::from)?;
                let picked = svc.mediator.pickup(&to, 1).map_err(FlowError::from)?;
                let Some(QueuedMessage::Envelope(env)) = picked.into_iter().next() else {
                    return Err(FlowError::UnexpectedMessage("text").into());
                };
                let (_, msg) = unpack_envelope(&mut patient, &env).map_err(FlowError::from)?;
                if msg != body {
                    return Err(FlowError::UnexpectedMessage("text").into());
                }
                Ok(())
            })
        }
        BenchOp::EstablishConnection => measure(op, n, tps, |_| Ok(()), |i, ()| {
            let alias = format!("c{i}");
            cast.world.with_pair(DOCTOR, PATIENT, |svc, d, p, rng| {
                flows::connect(svc, d, p, &alias, &alias, ConnectOptions::default(), rng)
            })??;
            cast.world.svc.take_trace();
            Ok(())
        }),
        BenchOp::ReadDid => {
            let did = cast.world.wallet(PATIENT)?.anywise_did().cloned().expect("onboarded");
            let ledger = &cast.world.svc.ledger;
            measure(op, n, tps, |_| Ok(()), |_, ()| {
                ledger.get_did(&did).map_err(FlowError::from)?;
                Ok(())
            })
        }
        BenchOp::WriteDid => {
            let writers = (0..n).map(|_| authorized_writer(&mut cast.world)).collect::<Result<Vec<_>, _>>()?;
            let ledger = &cast.world.svc.ledger;
            let mut writers = writers.into_iter();
            measure(op, n, tps, |_| Ok(writers.next().expect("one writer per iteration")), |_, (identity, doc)| {
                ledger.put_did(&identity, &doc).map_err(FlowError::from)?;
                Ok(())
            })
        }
    }
}

/// Runs each op in a fresh world. An op that fails at any point yields a
/// row of NaNs rather than aborting the whole bench; zero iterations yield
/// no rows.
pub fn run_bench(ops: &[BenchOp], config: &BenchConfig) -> Vec<BenchReport> {
    if config.iterations == 0 {
        return Vec::new();
    }
    ops.iter()
        .map(|op| run_op(*op, config).unwrap_or_else(|_| BenchReport::failed(*op, config.iterations)))
        .collect()
}
