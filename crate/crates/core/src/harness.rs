//! Budgeted training runs: the server message loop, the client training
//! loop, evaluation and metrics files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecKind};
use crate::config::{derive_seed, RunConfig, Setup};
use crate::cost::BudgetLedger;
use crate::data::{generate_synthetic, Dataset};
use crate::error::{Error, ProtocolError, Result};
use crate::roles::{ClientRole, ServerRole, StepReport};
use crate::tensor::Tensor;
use crate::transport::{in_process_pair, tcp_connect, Endpoint, TcpServer, TransportKind};
use crate::vit::{ServerModel, SplitModel};
use crate::wire::Message;

/// Samples per evaluation request.
const EVAL_CHUNK: usize = 128;

/// How long a client keeps retrying a refused TCP connection.
pub const CONNECT_PATIENCE: Duration = Duration::from_secs(10);

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Model initialisation seed for a run seed; both roles use it.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, "init", 0)
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: u64,
    /// Iterations completed, in units of base epochs.
    pub epoch: f64,
    /// Charged bits so far.
    pub bits: f64,
    pub forward_bits: f64,
    pub backward_bits: f64,
    /// Label bits carried so far, not part of the charge.
    pub label_bits: f64,
    /// Mean server loss since the previous record.
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Final outcome of a run; one row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub codec: CodecKind,
    pub target_xi: Option<f64>,
    pub xi: f64,
    pub xi_forward: f64,
    pub xi_backward: f64,
    pub params: String,
    pub batch_size: usize,
    pub split_point: usize,
    pub seed: u64,
    pub budget_epochs: f64,
    pub budget_bits: f64,
    pub iterations: u64,
    pub iterations_per_epoch: usize,
    pub bits: f64,
    pub label_bits: f64,
    pub final_train_loss: Option<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

impl RunSummary {
    pub const CSV_HEADER: &'static str = "run,codec,target_xi,xi,xi_forward,xi_backward,params,batch_size,split_point,\
seed,budget_epochs,budget_bits,iterations,iterations_per_epoch,bits,label_bits,final_train_loss,val_accuracy,test_accuracy";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run,
            self.codec,
            opt(self.target_xi),
            self.xi,
            self.xi_forward,
            self.xi_backward,
            self.params,
            self.batch_size,
            self.split_point,
            self.seed,
            self.budget_epochs,
            self.budget_bits,
            self.iterations,
            self.iterations_per_epoch,
            self.bits,
            self.label_bits,
            opt(self.final_train_loss),
            self.val_accuracy,
            self.test_accuracy
        )
    }
}

pub fn write_summary(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut text = String::from(RunSummary::CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Codec parameters in a compact `name=value` form.
pub fn describe_codec(codec: &CodecConfig) -> String {
    match codec {
        CodecConfig::Base => String::new(),
        CodecConfig::Adc(c) => format!("clusters={} tokens={} merge={:?}", c.clusters, c.tokens, c.merge_vector),
        CodecConfig::TopK { k } => format!("k={k}"),
        CodecConfig::RandTopK { k, noise_scale } => format!("k={k} noise={noise_scale}"),
        CodecConfig::BottleNet { width } => format!("width={width}"),
        CodecConfig::C3sl { ratio } => format!("superposition={ratio}"),
    }
}

/// The configured dataset file, or the synthetic set it describes.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let data = match &config.data {
        Some(path) => Dataset::load(path)?,
        None => generate_synthetic(&config.synthetic())?,
    };
    let (c, h, w) = data.image_dims();
    if (c, h, w) != (config.channels, config.image_size, config.image_size) || data.classes != config.classes {
        return Err(Error::Config(format!(
            "dataset has {c}x{h}x{w} images in {} classes; the model expects {}x{}x{} in {}",
            data.classes, config.channels, config.image_size, config.image_size, config.classes
        )));
    }
    Ok(data)
}

/// Top-1 accuracy of `[N, L]` logits.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let classes = logits.cols();
    let correct = logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Server side of one session: handshake, then training and evaluation
/// requests until shutdown. Returns the trained server half.
pub fn serve(endpoint: &mut Endpoint) -> Result<ServerModel> {
    let config = match endpoint.recv()? {
        Message::Hello(json) => serde_json::from_str::<RunConfig>(&json)
            .map_err(|e| Error::Config(format!("handshake configuration: {e}")))?,
        other => {
            return Err(ProtocolError::Unexpected {
                expected: "hello",
                got: other.name().into(),
            }
            .into())
        }
    };
    let result = serve_session(endpoint, &config);
    if let Err(e) = &result {
        if !matches!(e, Error::Transport { .. }) {
            let _ = endpoint.send(&Message::Error(e.to_string()));
        }
    }
    result
}

fn serve_session(endpoint: &mut Endpoint, config: &RunConfig) -> Result<ServerModel> {
    let setup = config.setup()?;
    endpoint.set_dtype(config.wire);
    let model = SplitModel::init(&setup.model, init_seed(config.seed))?;
    let mut server = ServerRole::new(model.server, &setup, config.seed)?;
    endpoint.send(&Message::Ready)?;
    let mut next = 0u32;
    loop {
        match endpoint.recv()? {
            Message::Activation(packet) => {
                if packet.iteration != next {
                    return Err(ProtocolError::Lockstep {
                        sent: next,
                        received: packet.iteration,
                    }
                    .into());
                }
                endpoint.set_iteration(packet.iteration);
                let reply = server.train(&packet)?;
                endpoint.send(&Message::Gradient(reply))?;
                next += 1;
            }
            Message::EvalRequest { iteration, activations } => {
                let logits = server.evaluate(&activations)?;
                endpoint.send(&Message::EvalResponse { iteration, logits })?;
            }
            Message::Shutdown => return Ok(server.model),
            Message::Error(e) => return Err(ProtocolError::Remote(e).into()),
            other => {
                return Err(ProtocolError::Unexpected {
                    expected: "activation, eval request or shutdown",
                    got: other.name().into(),
                }
                .into())
            }
        }
    }
}

fn expect_reply(endpoint: &mut Endpoint, expected: &'static str) -> Result<Message> {
    match endpoint.recv()? {
        Message::Error(e) => Err(ProtocolError::Remote(e).into()),
        msg if msg.name() == expected => Ok(msg),
        other => Err(ProtocolError::Unexpected {
            expected,
            got: other.name().into(),
        }
        .into()),
    }
}

/// Client side of a session with evaluation through the server.
pub struct ClientSession<'a> {
    pub client: ClientRole,
    endpoint: &'a mut Endpoint,
    iteration: u32,
}

impl<'a> ClientSession<'a> {
    /// Handshake: sends the configuration and waits for the server.
    pub fn open(config: &RunConfig, setup: &Setup, endpoint: &'a mut Endpoint) -> Result<Self> {
        endpoint.set_dtype(config.wire);
        endpoint.send(&Message::Hello(serde_json::to_string(config)?))?;
        expect_reply(endpoint, "ready")?;
        let model = SplitModel::init(&setup.model, init_seed(config.seed))?;
        Ok(Self {
            client: ClientRole::new(model.client, setup, config.seed)?,
            endpoint,
            iteration: 0,
        })
    }

    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepReport> {
        let it = self.iteration;
        let ep = &mut *self.endpoint;
        ep.set_iteration(it);
        let report = self.client.train_step(images, labels, it, |packet| {
            ep.send(&Message::Activation(packet))?;
            match expect_reply(ep, "gradient")? {
                Message::Gradient(g) => Ok(g),
                _ => unreachable!(),
            }
        })?;
        self.iteration += 1;
        Ok(report)
    }

    /// Accuracy on the given samples along the uncompressed path.
    pub fn evaluate(&mut self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Ok(0.0);
        }
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for chunk in indices.chunks(EVAL_CHUNK) {
            let (images, ys) = data.batch(chunk);
            let activations = self.client.eval_activations(&images)?;
            self.endpoint.send(&Message::EvalRequest {
                iteration: self.iteration,
                activations,
            })?;
            match expect_reply(self.endpoint, "eval response")? {
                Message::EvalResponse { logits: l, .. } => logits.push(l),
                _ => unreachable!(),
            }
            labels.extend(ys);
        }
        let rows: usize = logits.iter().map(Tensor::rows).sum();
        let classes = logits[0].cols();
        let flat = logits.into_iter().flat_map(Tensor::into_data).collect();
        Ok(accuracy(&Tensor::new(vec![rows, classes], flat)?, &labels))
    }

    pub fn close(self) -> Result<ClientRole> {
        self.endpoint.send(&Message::Shutdown)?;
        Ok(self.client)
    }
}

/// What a finished client run produced.
pub struct ClientOutcome {
    pub summary: RunSummary,
    pub records: Vec<MetricRecord>,
    pub client: ClientRole,
}

/// Client training loop under the communication budget. Writes the metrics
/// file and a one-row summary into `run_dir` when given.
pub fn run_client(config: &RunConfig, data: &Dataset, endpoint: &mut Endpoint, run_dir: Option<&Path>) -> Result<ClientOutcome> {
    let setup = config.setup()?;
    let train = &data.split.train;
    let batch = setup.batch;
    let per_epoch = train.len() / batch;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training samples do not fill a batch of {batch}",
            train.len()
        )));
    }
    let budget = setup.cost.budget_for_epochs(config.budget_epochs, per_epoch);
    let step_cost = setup.cost.iteration_cost(setup.ratios);
    let eval_every = if config.eval_every == 0 {
        per_epoch as u64
    } else {
        config.eval_every
    };

    let mut metrics = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };

    let mut session = ClientSession::open(config, &setup, endpoint)?;
    let mut ledger = BudgetLedger::new(budget);
    let mut label_bits = 0.0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    let mut last_loss = None;
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::new();

    let mut record = |session: &mut ClientSession, ledger: &BudgetLedger, label_bits: f64, loss: Option<f64>| -> Result<MetricRecord> {
        let rec = MetricRecord {
            iteration: ledger.iterations,
            epoch: ledger.iterations as f64 / per_epoch as f64,
            bits: ledger.spent(),
            forward_bits: ledger.spent_forward,
            backward_bits: ledger.spent_backward,
            label_bits,
            train_loss: loss,
            val_accuracy: session.evaluate(data, &data.split.val)?,
            test_accuracy: session.evaluate(data, &data.split.test)?,
        };
        if let Some((w, path)) = metrics.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(rec)
    };

    loop {
        let it = ledger.iterations;
        if config.max_iterations.is_some_and(|m| it >= m) || ledger.ensure_affordable(step_cost).is_err() {
            break;
        }
        let pos = (it % per_epoch as u64) as usize;
        if pos == 0 {
            order = train.clone();
            let epoch = it / per_epoch as u64;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle", epoch)));
        }
        let (images, labels) = data.batch(&order[pos * batch..(pos + 1) * batch]);
        let report = session.step(&images, &labels)?;
        ledger.charge_forward(report.forward_bits)?;
        ledger.charge_backward(report.backward_bits)?;
        ledger.complete_iteration();
        label_bits += report.label_bits;
        loss_sum += report.loss;
        loss_count += 1;
        if !report.loss.is_finite() {
            return Err(Error::contract(format!("training loss diverged at iteration {it}")));
        }
        if ledger.iterations.is_multiple_of(eval_every) {
            let loss = loss_sum / loss_count as f64;
            last_loss = Some(loss);
            records.push(record(&mut session, &ledger, label_bits, Some(loss))?);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    if records.last().is_none_or(|r| r.iteration != ledger.iterations) {
        let loss = (loss_count > 0).then(|| loss_sum / loss_count as f64);
        if loss.is_some() {
            last_loss = loss;
        }
        records.push(record(&mut session, &ledger, label_bits, loss)?);
    }
    if let Some((mut w, path)) = metrics.take() {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let client = session.close()?;

    let last = records.last().expect("at least one record");
    let summary = RunSummary {
        run: config.run_name(),
        codec: config.codec,
        target_xi: config.xi,
        xi: setup.ratios.overall(),
        xi_forward: setup.ratios.forward,
        xi_backward: setup.ratios.backward,
        params: describe_codec(&setup.codec),
        batch_size: batch,
        split_point: config.split_point,
        seed: config.seed,
        budget_epochs: config.budget_epochs,
        budget_bits: budget,
        iterations: ledger.iterations,
        iterations_per_epoch: per_epoch,
        bits: ledger.spent(),
        label_bits,
        final_train_loss: last_loss,
        val_accuracy: last.val_accuracy,
        test_accuracy: last.test_accuracy,
    };
    if let Some(dir) = run_dir {
        write_summary(&dir.join(SUMMARY_FILE), std::slice::from_ref(&summary))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, config.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ClientOutcome { summary, records, client })
}

/// Output directory of a run.
pub fn run_dir(config: &RunConfig) -> PathBuf {
    config.out.join(config.run_name())
}

/// Runs both roles in this process over the configured transport. The
/// server role runs on its own thread.
pub fn run_experiment(config: &RunConfig, data: &Dataset, run_dir: Option<&Path>) -> Result<ClientOutcome> {
    config.setup()?;
    let (mut client_end, server) = match config.transport {
        TransportKind::InProcess => {
            let (client_end, mut server_end) = in_process_pair(config.wire);
            (client_end, thread::spawn(move || serve(&mut server_end)))
        }
        TransportKind::Tcp => {
            let listener = TcpServer::bind(&config.addr)?;
            let addr = listener.local_addr()?.to_string();
            let wire = config.wire;
            let server = thread::spawn(move || serve(&mut listener.accept(wire)?));
            (tcp_connect(&addr, config.wire, CONNECT_PATIENCE)?, server)
        }
    };
    let outcome = run_client(config, data, &mut client_end, run_dir);
    drop(client_end);
    let served = server.join().map_err(|_| Error::contract("server thread panicked"))?;
    let outcome = outcome?;
    let server_model = served?;
    if let Some(dir) = run_dir {
        let model = SplitModel {
            client: outcome.client.model.clone(),
            server: server_model,
        };
        model.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(outcome)
}

/// The grid a sweep covers: every codec at every ratio and seed. The base
/// codec ignores the ratios and runs once per seed.
pub fn sweep_configs(base: &RunConfig, codecs: &[CodecKind], ratios: &[f64], seeds: &[u64]) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for &codec in codecs {
        for &seed in seeds {
            if codec == CodecKind::Base {
                out.push(RunConfig {
                    codec,
                    xi: None,
                    seed,
                    ..base.clone()
                });
                continue;
            }
            for &xi in ratios {
                out.push(RunConfig {
                    codec,
                    xi: Some(xi),
                    seed,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Runs every configuration on one dataset and writes `summary.csv` under
/// the output directory of `base`.
pub fn sweep(base: &RunConfig, configs: &[RunConfig], mut progress: impl FnMut(&RunSummary)) -> Result<Vec<RunSummary>> {
    let data = load_dataset(base)?;
    for c in configs {
        c.setup()?;
    }
    let mut rows = Vec::new();
    for c in configs {
        let dir = run_dir(c);
        let outcome = run_experiment(c, &data, Some(&dir))?;
        progress(&outcome.summary);
        rows.push(outcome.summary);
    }
    fs::create_dir_all(&base.out).map_err(|e| Error::io(&base.out, e))?;
    write_summary(&base.out.join(SUMMARY_FILE), &rows)?;
    Ok(rows)
}
