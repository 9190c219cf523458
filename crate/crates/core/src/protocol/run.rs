use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{generate_hypersphere_prototypes, AlignFed, FedProto, FedTgp};
use crate::data::{
    carve_global_test, dirichlet_partition, generate_hierarchical_dataset, load_dataset, ClientDataset,
    Dataset, PartitionSpec,
};
use crate::error::{Error, Result, ResultExt};
use crate::metrics::{evaluate_client, top_k_accuracy, ClientTraffic, RoundMetrics, SimilarityReport};
use crate::numerics::{softmax_cross_entropy, Matrix, RngStream, StreamId};
use crate::text::{
    build_prompts, encode_text_prototypes, server_alignment_loss, train_prompts, EmbeddingFile, EncoderSpec,
    FrozenEncoder, PromptBank,
};
use crate::vision::{assign_architectures, weighted_average, Linear, ModelParams};

use super::client::{client_local_train, sample_participants, AlignmentTarget, LocalTrainConfig};
use super::config::{ExperimentConfig, Method};
use super::prototypes::{compute_local_prototypes, GlobalPrototypes, Uplink};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlignmentKind {
    Contrastive { tau: f64 },
    SquaredDistance,
}

/// Server-to-client message of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    pub prototypes: Matrix,
    pub mask: Vec<bool>,
    pub kind: AlignmentKind,
    pub lambda: f64,
    /// Number of floats each receiving client downloads.
    pub floats_per_client: u64,
}

impl Broadcast {
    pub fn target(&self) -> AlignmentTarget<'_> {
        match self.kind {
            AlignmentKind::Contrastive { tau } => AlignmentTarget::Contrastive {
                targets: &self.prototypes,
                mask: &self.mask,
                tau,
            },
            AlignmentKind::SquaredDistance => AlignmentTarget::SquaredDistance {
                targets: &self.prototypes,
                mask: &self.mask,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerOutput {
    pub broadcast: Option<Broadcast>,
    pub server_loss: Option<f64>,
}

/// The per-method server phase, run once per round after aggregation.
pub trait ServerStrategy: Send {
    fn server_step(&mut self, global: &GlobalPrototypes, round: usize) -> Result<ServerOutput>;

    /// Prototype banks reported in the run outputs.
    fn banks(&self, global: &GlobalPrototypes) -> Vec<PrototypeSnapshot>;

    fn prompt_bank(&self) -> Option<&PromptBank> {
        None
    }

    fn encoder(&self) -> Option<&FrozenEncoder> {
        None
    }
}

/// Text prototypes from trainable prompts, fitted to the image prototypes.
pub struct FedTsp {
    pub bank: PromptBank,
    pub encoder: FrozenEncoder,
    pub lambda: f64,
    pub tau: f64,
    pub prompt_lr: f64,
    pub server_epochs: usize,
    text: Option<Matrix>,
}

impl FedTsp {
    pub fn new(bank: PromptBank, encoder: FrozenEncoder, cfg: &ExperimentConfig) -> Self {
        Self {
            bank,
            encoder,
            lambda: cfg.lambda,
            tau: cfg.tau,
            prompt_lr: cfg.prompt_lr,
            server_epochs: cfg.server_epochs,
            text: None,
        }
    }
}

impl ServerStrategy for FedTsp {
    fn server_step(&mut self, global: &GlobalPrototypes, _round: usize) -> Result<ServerOutput> {
        let mut server_loss = None;
        if global.num_present() >= 2 {
            if self.server_epochs > 0 && self.bank.prefix_len() > 0 && self.prompt_lr > 0.0 {
                let fit = train_prompts(
                    &mut self.bank,
                    &self.encoder,
                    &global.protos,
                    &global.mask,
                    self.tau,
                    self.prompt_lr,
                    self.server_epochs,
                )?;
                server_loss = Some(fit.final_loss);
            } else {
                let text = encode_text_prototypes(&self.bank, &self.encoder)?;
                server_loss = Some(server_alignment_loss(&text.mean, &global.protos, &global.mask, self.tau)?.0);
            }
        }
        let text = encode_text_prototypes(&self.bank, &self.encoder)?.mean;
        let floats = text.as_slice().len() as u64;
        self.text = Some(text.clone());
        Ok(ServerOutput {
            broadcast: Some(Broadcast {
                prototypes: text,
                mask: global.mask.clone(),
                kind: AlignmentKind::Contrastive { tau: self.tau },
                lambda: self.lambda,
                floats_per_client: floats,
            }),
            server_loss,
        })
    }

    fn banks(&self, global: &GlobalPrototypes) -> Vec<PrototypeSnapshot> {
        let text = match &self.text {
            Some(t) => t.clone(),
            None => match encode_text_prototypes(&self.bank, &self.encoder) {
                Ok(t) => t.mean,
                Err(_) => return Vec::new(),
            },
        };
        vec![
            PrototypeSnapshot {
                name: "text".into(),
                mask: vec![true; text.rows()],
                prototypes: text,
            },
            PrototypeSnapshot {
                name: "image".into(),
                prototypes: global.protos.clone(),
                mask: global.mask.clone(),
            },
        ]
    }

    fn prompt_bank(&self) -> Option<&PromptBank> {
        Some(&self.bank)
    }

    fn encoder(&self) -> Option<&FrozenEncoder> {
        Some(&self.encoder)
    }
}

/// A named prototype matrix with the classes it actually covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSnapshot {
    pub name: String,
    pub prototypes: Matrix,
    pub mask: Vec<bool>,
}

impl PrototypeSnapshot {
    pub fn present_rows(&self) -> (Vec<usize>, Matrix) {
        let classes: Vec<usize> = (0..self.mask.len()).filter(|&c| self.mask[c]).collect();
        let rows = self.prototypes.select_rows(&classes);
        (classes, rows)
    }

    /// Similarity structure over the covered classes.
    pub fn similarity(&self, hierarchy: Option<&[usize]>) -> Result<(Vec<usize>, SimilarityReport)> {
        let (classes, rows) = self.present_rows();
        let sub = hierarchy.map(|h| classes.iter().map(|&c| h[c]).collect::<Vec<_>>());
        let report = crate::metrics::semantic_structure_score(&rows, sub.as_deref())?;
        Ok((classes, report))
    }
}

/// Data and text assets shared by every method run on one config.
#[derive(Clone, Debug)]
pub struct Federation {
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_names: Vec<String>,
    pub hierarchy: Option<Vec<usize>>,
    pub clients: Vec<ClientDataset>,
    pub global_test: Dataset,
    pub prompt_bank: Option<PromptBank>,
    pub encoder: Option<FrozenEncoder>,
}

pub fn load_source_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset_path {
        Some(path) => load_dataset(path),
        None => generate_hierarchical_dataset(&cfg.synthetic, cfg.seed),
    }
}

/// Toy-tokenizer prompts from the dataset descriptions, or an embedding file.
pub fn build_text_assets(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(PromptBank, FrozenEncoder)> {
    if let Some(path) = &cfg.embedding_path {
        let file = EmbeddingFile::load(path)?;
        for w in file.validate()? {
            log::warn!("{path}: {w}");
        }
        let names: Vec<&String> = file.classes.iter().map(|c| &c.name).collect();
        if names.len() != dataset.class_names.len() || names.iter().zip(&dataset.class_names).any(|(a, b)| *a != b) {
            return Err(Error::Config(format!(
                "embedding file classes {names:?} do not match dataset classes {:?}",
                dataset.class_names
            )));
        }
        let spec = EncoderSpec {
            embed_dim: file.embed_dim,
            ..cfg.encoder.clone()
        };
        let encoder = FrozenEncoder::new(&spec, cfg.feature_dim, cfg.seed)?;
        let bank = PromptBank::from_embedding_file(&file, cfg.prefix_len)?;
        return Ok((bank, encoder));
    }
    let encoder = FrozenEncoder::new(&cfg.encoder, cfg.feature_dim, cfg.seed)?;
    let descriptions = dataset.descriptions_in_order().unwrap_or_else(|| {
        log::warn!("dataset has no class descriptions; prompting with class names only");
        dataset
            .class_names
            .iter()
            .map(|n| vec![format!("a {n}"); cfg.prompts_per_class])
            .collect()
    });
    let prompts = build_prompts(&dataset.class_names, &descriptions, cfg.prompts_per_class)?;
    let bank = PromptBank::from_text(dataset.class_names.clone(), prompts, &encoder, cfg.prefix_len)?;
    Ok((bank, encoder))
}

/// Builds or loads the dataset, carves the global test set and partitions
/// the rest. The partition depends only on the data and the seed.
pub fn prepare_federation(cfg: &ExperimentConfig) -> Result<Federation> {
    cfg.validate()?;
    let dataset = load_source_dataset(cfg).context(|| "data")?;
    dataset.validate()?;
    let (rest, global_test) = carve_global_test(&dataset, cfg.global_test_per_class, cfg.seed);
    let clients = dirichlet_partition(
        &rest,
        &PartitionSpec {
            alpha: cfg.alpha,
            num_clients: cfg.num_clients,
            seed: cfg.seed,
        },
    )
    .context(|| "partition")?;
    let (prompt_bank, encoder) = if cfg.method == Method::Fedtsp {
        let (b, e) = build_text_assets(cfg, &dataset).context(|| "text encoder")?;
        (Some(b), Some(e))
    } else {
        (None, None)
    };
    Ok(Federation {
        num_classes: dataset.num_classes,
        input_dim: dataset.input_dim(),
        class_names: dataset.class_names.clone(),
        hierarchy: dataset.hierarchy.clone(),
        clients,
        global_test,
        prompt_bank,
        encoder,
    })
}

/// Client `i` draws its initial weights from stream `("init-model", i, 0)`.
pub fn init_models(cfg: &ExperimentConfig, fed: &Federation) -> Result<Vec<ModelParams>> {
    let archs = assign_architectures(fed.clients.len(), &cfg.architecture_family())?;
    archs
        .iter()
        .enumerate()
        .map(|(i, arch)| {
            let mut rng = RngStream::for_stream(cfg.seed, "init-model", i as u64, 0);
            ModelParams::init(arch, fed.input_dim, fed.num_classes, &mut rng)
        })
        .collect()
}

pub fn build_strategy(cfg: &ExperimentConfig, fed: &Federation) -> Result<Option<Box<dyn ServerStrategy>>> {
    let d = cfg.feature_dim;
    let c = fed.num_classes;
    Ok(match cfg.method {
        Method::Fedtsp => {
            let (Some(bank), Some(encoder)) = (&fed.prompt_bank, &fed.encoder) else {
                return Err(Error::ProtocolMisuse(
                    "FedTSP needs a prompt bank and encoder in the federation".into(),
                ));
            };
            Some(Box::new(FedTsp::new(bank.clone(), encoder.clone(), cfg)))
        }
        Method::Fedproto => Some(Box::new(FedProto {
            lambda: cfg.fedproto_lambda,
        })),
        Method::Fedtgp => Some(Box::new(FedTgp::new(
            c,
            d,
            cfg.fedtgp_lambda,
            cfg.fedtgp_margin,
            cfg.fedtgp_server_lr,
            cfg.server_epochs,
        ))),
        Method::Alignfed => {
            let mut rng = RngStream::new(cfg.seed, StreamId::global("hypersphere"));
            Some(Box::new(AlignFed {
                bank: generate_hypersphere_prototypes(c, d, &mut rng)?,
                lambda_start: cfg.alignfed_lambda_start,
                lambda_end: cfg.alignfed_lambda_end,
                rounds: cfg.rounds,
            }))
        }
        Method::Local | Method::Fedavg => None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for client-parallel phases; `<= 1` runs sequentially.
    /// Results do not depend on this value.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

/// Per-client outcome of classifier-only fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct PflResult {
    pub models: Vec<ModelParams>,
    /// Best local test top-1 over epochs `0..=finetune_epochs`.
    pub best_top1: Vec<Option<f64>>,
    pub mean_best_top1: f64,
    /// Train-split cross-entropy before each epoch and after the last one.
    pub train_losses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub method: String,
    pub mode: String,
    /// Entry 0 is the evaluation before any training.
    pub history: Vec<RoundMetrics>,
    pub final_models: Vec<ModelParams>,
    pub global_model: Option<ModelParams>,
    pub global_prototypes: GlobalPrototypes,
    pub banks: Vec<PrototypeSnapshot>,
    pub prompt_bank: Option<PromptBank>,
    pub encoder: Option<FrozenEncoder>,
    pub pfl: Option<PflResult>,
    pub model_uplink_floats: u64,
    pub model_downlink_floats: u64,
}

fn map_clients<T: Send>(
    pool: Option<&rayon::ThreadPool>,
    ids: &[usize],
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match pool {
        Some(p) => p.install(|| ids.par_iter().map(|&i| f(i)).collect()),
        None => ids.iter().map(|&i| f(i)).collect(),
    }
}

fn evaluate_round(
    round: usize,
    models: &[ModelParams],
    fed: &Federation,
    traffic: Vec<ClientTraffic>,
    server_loss: Option<f64>,
    mean_client_loss: Option<f64>,
) -> Result<RoundMetrics> {
    let mut top1 = Vec::with_capacity(models.len());
    let mut top5 = Vec::with_capacity(models.len());
    let mut global = Vec::new();
    for (model, data) in models.iter().zip(&fed.clients) {
        if data.num_test() == 0 {
            top1.push(None);
            top5.push(None);
        } else {
            let acc = evaluate_client(model, &data.test_inputs, &data.test_labels)?;
            top1.push(Some(acc.top1));
            top5.push(Some(acc.top5));
        }
        if !fed.global_test.is_empty() {
            let logits = model.logits(&fed.global_test.inputs)?;
            global.push(top_k_accuracy(&logits, &fed.global_test.labels, 1)?);
        }
    }
    let mean = |v: &[Option<f64>]| -> Result<f64> {
        let vals: Vec<f64> = v.iter().flatten().copied().collect();
        if vals.is_empty() {
            return Err(Error::Metric("no client has a local test split".into()));
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(RoundMetrics {
        round,
        mean_local_top1: mean(&top1)?,
        mean_local_top5: mean(&top5)?,
        client_top1: top1,
        client_top5: top5,
        global_top1: (!global.is_empty()).then(|| global.iter().sum::<f64>() / global.len() as f64),
        server_loss,
        mean_client_loss,
        traffic,
    })
}

fn compute_uplinks(
    pool: Option<&rayon::ThreadPool>,
    ids: &[usize],
    models: &[ModelParams],
    fed: &Federation,
    round: usize,
) -> Result<Vec<Uplink>> {
    map_clients(pool, ids, |i| {
        Ok(Uplink {
            client: i,
            entries: compute_local_prototypes(&models[i], &fed.clients[i])
                .context(|| format!("round {round}, client {i}: local prototypes"))?,
        })
    })
}

/// Runs the configured method end to end on a prepared federation.
pub fn run_experiment(cfg: &ExperimentConfig, fed: &Federation, opts: RunOptions) -> Result<RunResult> {
    let strategy = build_strategy(cfg, fed)?;
    run_with_strategy(cfg, fed, strategy, opts)
}

/// The round loop shared by every method. `strategy = None` disables
/// prototype exchange (local-only and FedAvg).
pub fn run_with_strategy(
    cfg: &ExperimentConfig,
    fed: &Federation,
    mut strategy: Option<Box<dyn ServerStrategy>>,
    opts: RunOptions,
) -> Result<RunResult> {
    cfg.validate()?;
    let n = fed.clients.len();
    if n != cfg.num_clients {
        return Err(Error::Config(format!(
            "federation has {n} clients, config expects {}",
            cfg.num_clients
        )));
    }
    let pool = if opts.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?,
        )
    } else {
        None
    };
    let pool = pool.as_ref();
    let averaging = cfg.mode.averages_models() || cfg.method == Method::Fedavg;

    let mut models = init_models(cfg, fed)?;
    if averaging {
        let common = models[0].clone();
        models.iter_mut().for_each(|m| *m = common.clone());
    }
    let model_size = models[0].num_params() as u64;
    let mut global_model = averaging.then(|| models[0].clone());
    let mut global = GlobalPrototypes::new(fed.num_classes, cfg.feature_dim);
    let (mut model_up, mut model_down) = (0u64, 0u64);

    let zero_traffic = || -> Vec<ClientTraffic> {
        (0..n)
            .map(|client| ClientTraffic {
                client,
                uplink_floats: 0,
                downlink_floats: 0,
            })
            .collect()
    };
    let everyone: Vec<usize> = (0..n).collect();
    let mut pending = Vec::new();
    let mut traffic = zero_traffic();
    if strategy.is_some() {
        pending = compute_uplinks(pool, &everyone, &models, fed, 0)?;
        for u in &pending {
            traffic[u.client].uplink_floats = u.floats();
        }
    }
    let mut history = vec![evaluate_round(0, &models, fed, traffic, None, None).context(|| "round 0: evaluation")?];

    let train_cfg = LocalTrainConfig {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.client_lr,
        lambda: 0.0,
    };
    for t in 0..cfg.rounds {
        let mut traffic = zero_traffic();
        let mut output = None;
        if let Some(s) = strategy.as_mut() {
            if !pending.is_empty() {
                global.aggregate(&pending, t).context(|| format!("round {t}: aggregation"))?;
            }
            output = Some(s.server_step(&global, t).context(|| format!("round {t}: server"))?);
        }
        let broadcast = output.as_ref().and_then(|o| o.broadcast.as_ref());

        let mut prng = RngStream::for_stream(cfg.seed, "participation", 0, t as u64);
        let participants = sample_participants(n, cfg.participation_rate, &mut prng)?;
        let trained = map_clients(pool, &participants, |i| {
            let mut model = models[i].clone();
            let mut rng = RngStream::for_stream(cfg.seed, "local-train", i as u64, t as u64);
            let (target, lambda) = match broadcast {
                Some(b) => (b.target(), b.lambda),
                None => (AlignmentTarget::None, 0.0),
            };
            let report = client_local_train(
                &mut model,
                &fed.clients[i],
                target,
                &LocalTrainConfig { lambda, ..train_cfg },
                &mut rng,
            )
            .context(|| format!("round {t}, client {i}: local training"))?;
            Ok((model, report))
        })?;
        let mut losses = Vec::new();
        for (&i, (model, report)) in participants.iter().zip(trained) {
            models[i] = model;
            traffic[i].downlink_floats = broadcast.map_or(0, |b| b.floats_per_client);
            losses.extend(report.mean_loss);
        }

        if averaging {
            let weights: Vec<f64> = participants.iter().map(|&i| fed.clients[i].num_train() as f64).collect();
            let refs: Vec<&ModelParams> = participants.iter().map(|&i| &models[i]).collect();
            let avg = weighted_average(&refs, &weights).context(|| format!("round {t}: model averaging"))?;
            models.iter_mut().for_each(|m| *m = avg.clone());
            global_model = Some(avg);
            model_up += model_size * participants.len() as u64;
            model_down += model_size * n as u64;
        }

        if strategy.is_some() {
            pending = compute_uplinks(pool, &participants, &models, fed, t)?;
            for u in &pending {
                traffic[u.client].uplink_floats = u.floats();
            }
        }
        let mean_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        history.push(
            evaluate_round(t + 1, &models, fed, traffic, output.and_then(|o| o.server_loss), mean_loss)
                .context(|| format!("round {t}: evaluation"))?,
        );
    }

    let pfl = if cfg.mode == super::config::Mode::Pfl {
        Some(run_pfl_finetune(&models, &fed.clients, cfg.pfl_finetune_epochs, cfg.pfl_lr).context(|| "pfl")?)
    } else {
        None
    };
    let banks = strategy.as_ref().map(|s| s.banks(&global)).unwrap_or_default();
    let prompt_bank = strategy.as_ref().and_then(|s| s.prompt_bank().cloned());
    let encoder = strategy.as_ref().and_then(|s| s.encoder().cloned());
    Ok(RunResult {
        method: cfg.method.to_string(),
        mode: cfg.mode.to_string(),
        history,
        final_models: models,
        global_model,
        global_prototypes: global,
        banks,
        prompt_bank,
        encoder,
        pfl,
        model_uplink_floats: model_up,
        model_downlink_floats: model_down,
    })
}

/// Freezes the extractor and runs full-batch cross-entropy descent on the
/// classifier of each client, keeping the best local test accuracy.
pub fn run_pfl_finetune(
    models: &[ModelParams],
    clients: &[ClientDataset],
    epochs: usize,
    lr: f64,
) -> Result<PflResult> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("fine-tuning lr must be positive, got {lr}")));
    }
    let mut out = PflResult {
        models: Vec::with_capacity(models.len()),
        best_top1: Vec::with_capacity(models.len()),
        mean_best_top1: 0.0,
        train_losses: Vec::with_capacity(models.len()),
    };
    for (i, (model, data)) in models.iter().zip(clients).enumerate() {
        let mut m = model.clone();
        let train_features = m.forward_features(&data.train_inputs)?;
        let test_features = m.forward_features(&data.test_inputs)?;
        let mut best: Option<f64> = None;
        let mut losses = Vec::with_capacity(epochs + 1);
        for e in 0..=epochs {
            if data.num_test() > 0 {
                let acc = top_k_accuracy(&m.classify(&test_features)?, &data.test_labels, 1)?;
                best = Some(best.map_or(acc, |b: f64| b.max(acc)));
            }
            if data.num_train() == 0 {
                continue;
            }
            let (ce, g) = softmax_cross_entropy(&m.classify(&train_features)?, &data.train_labels)?;
            losses.push(ce);
            if e < epochs {
                let grad = Linear {
                    weight: train_features.t_matmul(&g)?,
                    bias: g.column_sums(),
                };
                m.apply_classifier_gradient(&grad, lr)
                    .context(|| format!("client {i}: classifier fine-tuning"))?;
            }
        }
        out.models.push(m);
        out.best_top1.push(best);
        out.train_losses.push(losses);
    }
    let vals: Vec<f64> = out.best_top1.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::Metric("no client has a local test split".into()));
    }
    out.mean_best_top1 = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok(out)
}
