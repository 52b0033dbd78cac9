//! Client/server simulation: local training, client sampling, G-Prompt
//! averaging, domain-wise D-Prompt aggregation and Beta momentum averaging.

mod aggregate;
mod client;
mod momentum;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_dprompts, aggregate_gprompt, numeric_touch, ClientUpdate, TouchRule};
pub use client::{run_client, ClientState, ClientStats};
pub use momentum::MomentumAverager;

use crate::datagen::ClientShard;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Mat, Rng};
use crate::objectives::{loss_g_and_grad, static_query_embeddings, Frozen, ObjectiveOptions};
use crate::prompts::PromptBank;

/// How training samples are assigned to D-Prompt slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Joint class-domain matching with the client's learnable Q-Prompt.
    Learned,
    /// Matching against the fixed hand-crafted template; the Q-Prompt is not trained.
    Static,
    /// Ground-truth domain ids.
    DomainLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOptions {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
    pub objective: ObjectiveOptions,
    pub routing: Routing,
    /// Clients receive the momentum averages instead of the raw aggregates.
    pub download_momentum: bool,
    pub touch_rule: TouchRule,
    /// Run the sampled clients of a round on separate threads.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        TrainingOptions {
            num_clients: 20,
            clients_per_round: 5,
            rounds: 100,
            local_iters: 1,
            batch_size: 16,
            lambda: 1.0,
            beta: 0.2,
            lr: 5e-4,
            objective: ObjectiveOptions::default(),
            routing: Routing::Learned,
            download_momentum: false,
            touch_rule: TouchRule::Structural,
            parallel: true,
            seed: 0,
        }
    }
}

impl TrainingOptions {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::config(
                "clients_per_round",
                format!("must be in 1..={}, got {}", self.num_clients, self.clients_per_round),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config("beta", format!("must be finite and > 0, got {}", self.beta)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be finite and > 0, got {}", self.lr)));
        }
        if !(self.objective.tau_cont > 0.0) {
            return Err(Error::config("tau_cont", "must be > 0"));
        }
        Ok(())
    }
}

/// `H` distinct client ids drawn uniformly without replacement, sorted.
pub fn sample_clients(rng: &mut Rng, num_clients: usize, per_round: usize) -> Result<Vec<usize>> {
    if per_round == 0 || per_round > num_clients {
        return Err(Error::config(
            "clients_per_round",
            format!("must be in 1..={num_clients}, got {per_round}"),
        ));
    }
    Ok(rng.sample_sorted(num_clients, per_round))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub clients: Vec<usize>,
    pub loss_g: f64,
    pub loss_d: Option<f64>,
    pub loss_q: Option<f64>,
    /// Number of sampled clients that touched each D-Prompt slot.
    pub touch_counts: Vec<usize>,
    /// Samples routed to each slot over the round.
    pub routed: Vec<usize>,
    /// Train-mode routing accuracy against latent domains.
    pub query_accuracy: Option<f64>,
    pub clamps: u64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub g_prompt: Mat,
    pub d_prompts: Vec<Mat>,
    pub d_momentum: Vec<MomentumAverager>,
    rng: Rng,
}

impl ServerState {
    pub fn new(template: &PromptBank, opts: &TrainingOptions) -> Result<Self> {
        let d_prompts = template.d_tokens();
        let d_momentum = d_prompts
            .iter()
            .map(|d| MomentumAverager::with_init(d.as_slice(), opts.rounds, opts.beta))
            .collect::<Result<Vec<_>>>()?;
        Ok(ServerState {
            round: 0,
            g_prompt: template.g_prompt.clone(),
            d_prompts,
            d_momentum,
            rng: Rng::new(opts.seed).child("server"),
        })
    }

    pub fn momentum_prompts(&self) -> Vec<Mat> {
        self.d_prompts
            .iter()
            .zip(&self.d_momentum)
            .map(|(d, avg)| Mat::from_vec(d.rows(), d.cols(), avg.average().to_vec()).expect("averager keeps prompt shape"))
            .collect()
    }

    pub fn sample(&mut self, opts: &TrainingOptions) -> Result<Vec<usize>> {
        sample_clients(&mut self.rng, opts.num_clients, opts.clients_per_round)
    }

    /// Aggregates one round of updates and advances the momentum averages
    /// with slot `r + 1`. `base` is what the clients downloaded.
    pub fn apply(&mut self, base: &[Mat], updates: &[ClientUpdate], rule: TouchRule) -> Result<()> {
        self.g_prompt = aggregate_gprompt(updates)?;
        self.d_prompts = aggregate_dprompts(base, updates, rule)?;
        self.round += 1;
        for (avg, d) in self.d_momentum.iter_mut().zip(&self.d_prompts) {
            avg.update(d.as_slice(), self.round)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub g_prompt: Mat,
    pub d_prompts: Vec<Mat>,
    /// Momentum-averaged D-Prompts, used for inference.
    pub d_momentum: Vec<Mat>,
    pub rounds: Vec<RoundMetrics>,
    /// `V^G` after each round, starting with the initialization.
    pub g_history: Vec<Mat>,
    /// Whether any sampled client ever touched each slot.
    pub touched_ever: Vec<bool>,
    pub round_seconds: Vec<f64>,
}

impl TrainingOutcome {
    /// The bank used at inference: final `V^G` and momentum-averaged D-Prompts.
    pub fn inference_bank(&self, template: &PromptBank) -> Result<PromptBank> {
        let mut bank = template.clone();
        bank.g_prompt = self.g_prompt.clone();
        bank.set_d_tokens(self.d_momentum.clone())?;
        Ok(bank)
    }
}

fn check_shards(shards: &[ClientShard], opts: &TrainingOptions) -> Result<()> {
    if shards.len() != opts.num_clients {
        return Err(Error::config(
            "num_clients",
            format!("{} shards for {} clients", shards.len(), opts.num_clients),
        ));
    }
    Ok(())
}

/// Runs `R` federated rounds from the prompts in `template`.
pub fn run_training(
    template: &PromptBank,
    frozen: Frozen<'_>,
    shards: Vec<ClientShard>,
    opts: &TrainingOptions,
) -> Result<TrainingOutcome> {
    opts.validate()?;
    check_shards(&shards, opts)?;
    let static_query = match opts.routing {
        Routing::Static => Some(static_query_embeddings(template, frozen)?),
        _ => None,
    };
    let mut clients = shards
        .into_iter()
        .map(|s| ClientState::new(s, template, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut server = ServerState::new(template, opts)?;
    let num_domains = template.num_domains();
    let mut outcome = TrainingOutcome {
        g_prompt: server.g_prompt.clone(),
        d_prompts: server.d_prompts.clone(),
        d_momentum: server.momentum_prompts(),
        rounds: Vec::with_capacity(opts.rounds),
        g_history: vec![server.g_prompt.clone()],
        touched_ever: vec![false; num_domains],
        round_seconds: Vec::with_capacity(opts.rounds),
    };

    for r in 0..opts.rounds {
        let start = Instant::now();
        let selected = server.sample(opts)?;
        let base = if opts.download_momentum {
            server.momentum_prompts()
        } else {
            server.d_prompts.clone()
        };
        let g_in = server.g_prompt.clone();
        let mut picked: Vec<&mut ClientState> = clients
            .iter_mut()
            .filter(|c| selected.binary_search(&c.client_id()).is_ok())
            .collect();
        let sq = static_query.as_deref();
        let run = |c: &mut ClientState| run_client(c, r, &g_in, &base, template, frozen, sq, opts);
        let results: Vec<Result<(ClientUpdate, ClientStats)>> = if opts.parallel && picked.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = picked.iter_mut().map(|c| s.spawn(|| run(c))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Aggregation("client thread panicked".into()))))
                    .collect()
            })
        } else {
            picked.iter_mut().map(|c| run(c)).collect()
        };
        let mut updates = Vec::with_capacity(results.len());
        let mut stats = Vec::with_capacity(results.len());
        for res in results {
            let (u, s) = res?;
            updates.push(u);
            stats.push(s);
        }
        server.apply(&base, &updates, opts.touch_rule)?;

        let mut touch_counts = vec![0; num_domains];
        for u in &updates {
            for (m, &t) in u.touched.iter().enumerate() {
                if t {
                    touch_counts[m] += 1;
                    outcome.touched_ever[m] = true;
                }
            }
        }
        outcome.rounds.push(round_metrics(r, &selected, &stats, touch_counts, num_domains));
        outcome.g_history.push(server.g_prompt.clone());
        outcome.round_seconds.push(start.elapsed().as_secs_f64());
    }
    outcome.g_prompt = server.g_prompt.clone();
    outcome.d_momentum = server.momentum_prompts();
    outcome.d_prompts = server.d_prompts;
    Ok(outcome)
}

fn mean_of(total: f64, count: usize) -> Option<f64> {
    (count > 0).then(|| total / count as f64)
}

fn round_metrics(round: usize, clients: &[usize], stats: &[ClientStats], touch_counts: Vec<usize>, num_domains: usize) -> RoundMetrics {
    let sum = |f: fn(&ClientStats) -> f64| stats.iter().map(f).sum::<f64>();
    let count = |f: fn(&ClientStats) -> usize| stats.iter().map(f).sum::<usize>();
    let mut routed = vec![0; num_domains];
    for s in stats {
        for (m, n) in s.routed.iter().enumerate() {
            routed[m] += n;
        }
    }
    RoundMetrics {
        round,
        clients: clients.to_vec(),
        loss_g: mean_of(sum(|s| s.loss_g), count(|s| s.iterations)).unwrap_or(0.0),
        loss_d: mean_of(sum(|s| s.loss_d), count(|s| s.loss_d_count)),
        loss_q: mean_of(sum(|s| s.loss_q), count(|s| s.loss_q_count)),
        touch_counts,
        routed,
        query_accuracy: mean_of(count(|s| s.query_correct) as f64, count(|s| s.query_total)),
        clamps: stats.iter().map(|s| s.clamps).sum(),
    }
}

/// Reference federated training of the G-Prompt alone: plain cross-entropy,
/// sample-weighted averaging, no D-Prompts and no querying. Uses the same
/// client sampling and batch streams as [`run_training`]. Returns `V^G`
/// after each round, starting with the initialization.
pub fn run_gprompt_only(
    template: &PromptBank,
    frozen: Frozen<'_>,
    shards: Vec<ClientShard>,
    opts: &TrainingOptions,
) -> Result<Vec<Mat>> {
    opts.validate()?;
    check_shards(&shards, opts)?;
    let mut clients = shards
        .into_iter()
        .map(|s| ClientState::new(s, template, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut adams: Vec<AdamState> = (0..opts.num_clients)
        .map(|_| AdamState::new(template.g_prompt.as_slice().len(), opts.lr))
        .collect();
    let mut rng = Rng::new(opts.seed).child("server");
    let mut g = template.g_prompt.clone();
    let mut history = vec![g.clone()];
    for round in 0..opts.rounds {
        let selected = sample_clients(&mut rng, opts.num_clients, opts.clients_per_round)?;
        let mut weighted = Vec::with_capacity(selected.len());
        for &k in &selected {
            let mut local = g.clone();
            for iteration in 0..opts.local_iters {
                let batch = clients[k].next_batch(opts.batch_size);
                let mut bank = template.clone();
                bank.g_prompt = local.clone();
                let lg = loss_g_and_grad(&bank, frozen, &batch).map_err(|e| Error::Client {
                    client: k,
                    round,
                    iteration,
                    detail: e.to_string(),
                })?;
                adams[k].step(local.as_mut_slice(), lg.grad.as_slice(), "g_prompt")?;
            }
            weighted.push(ClientUpdate {
                client_id: k,
                round,
                g_prompt: local,
                d_prompts: Vec::new(),
                touched: Vec::new(),
                num_samples: clients[k].num_samples(),
            });
        }
        g = aggregate_gprompt(&weighted)?;
        history.push(g.clone());
    }
    Ok(history)
}
