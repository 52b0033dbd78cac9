use serde::{Deserialize, Serialize};

use super::{ClientUpdate, MomentumAverager, Routing, TrainingOptions};
use crate::datagen::{ClientShard, Sample};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Mat, Rng};
use crate::objectives::{local_objective, loss_q_and_grad, query_text_embeddings, route_with, Frozen};
use crate::prompts::PromptBank;

/// Per-client state that survives across rounds. Nothing here except what is
/// copied into a [`ClientUpdate`] leaves the client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub shard: ClientShard,
    pub q_prompt: Mat,
    pub q_momentum: MomentumAverager,
    pub q_iterations: usize,
    adam_g: AdamState,
    adam_d: Vec<AdamState>,
    adam_q: AdamState,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    batch_rng: Rng,
}

/// Sums of per-iteration quantities for one client round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub iterations: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_d_count: usize,
    pub loss_q: f64,
    pub loss_q_count: usize,
    pub query_correct: usize,
    pub query_total: usize,
    pub routed: Vec<usize>,
    pub clamps: u64,
}

impl ClientState {
    pub fn new(shard: ClientShard, template: &PromptBank, opts: &TrainingOptions) -> Result<Self> {
        let q = template.q_prompt.clone();
        let len = q.as_slice().len();
        let batch_rng = Rng::new(opts.seed).child(&format!("client:{}", shard.client_id));
        let mut state = ClientState {
            q_momentum: MomentumAverager::with_init(q.as_slice(), opts.rounds * opts.local_iters, opts.beta)?,
            q_prompt: q,
            q_iterations: 0,
            adam_g: AdamState::new(template.g_prompt.as_slice().len(), opts.lr),
            adam_d: template
                .d_prompts
                .iter()
                .map(|p| AdamState::new(p.tokens.as_slice().len(), opts.lr))
                .collect(),
            adam_q: AdamState::new(len, opts.lr),
            order: (0..shard.samples.len()).collect(),
            cursor: 0,
            epoch: 0,
            batch_rng,
            shard,
        };
        state.reshuffle();
        Ok(state)
    }

    pub fn client_id(&self) -> usize {
        self.shard.client_id
    }

    pub fn num_samples(&self) -> usize {
        self.shard.samples.len()
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.batch_rng.child(&format!("epoch:{}", self.epoch)).shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Next `min(b, |shard|)` samples of a cycling, per-epoch reshuffled order.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<Sample> {
        let n = self.order.len();
        let take = batch_size.min(n);
        let mut out = Vec::with_capacity(take);
        for _ in 0..take {
            if self.cursor == n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.shard.samples[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }
}

/// One round of local training starting from the downloaded prompts.
pub fn run_client(
    client: &mut ClientState,
    round: usize,
    g_in: &Mat,
    d_in: &[Mat],
    template: &PromptBank,
    frozen: Frozen<'_>,
    static_query: Option<&[Vec<Vec<f64>>]>,
    opts: &TrainingOptions,
) -> Result<(ClientUpdate, ClientStats)> {
    let id = client.client_id();
    if client.shard.samples.is_empty() {
        return Err(Error::Client {
            client: id,
            round,
            iteration: 0,
            detail: "empty shard".into(),
        });
    }
    let mut bank = template.clone();
    bank.g_prompt = g_in.clone();
    bank.set_d_tokens(d_in.to_vec())?;
    let num_domains = bank.num_domains();
    let mut touched = vec![false; num_domains];
    let mut stats = ClientStats {
        routed: vec![0; num_domains],
        ..Default::default()
    };
    let use_d = opts.lambda != 0.0;

    for t in 0..opts.local_iters {
        let ctx = |detail: String| Error::Client {
            client: id,
            round,
            iteration: t,
            detail,
        };
        let batch = client.next_batch(opts.batch_size);

        if use_d && opts.routing == Routing::Learned {
            bank.q_prompt = client.q_prompt.clone();
            let momentum = Mat::from_vec(
                client.q_prompt.rows(),
                client.q_prompt.cols(),
                client.q_momentum.average().to_vec(),
            )?;
            let lq = loss_q_and_grad(&bank, &momentum, frozen, &batch, &opts.objective).map_err(|e| ctx(e.to_string()))?;
            if !lq.total.is_finite() {
                return Err(ctx(format!("non-finite Q loss {}", lq.total)));
            }
            client
                .adam_q
                .step(client.q_prompt.as_mut_slice(), lq.grad.as_slice(), "q_prompt")
                .map_err(|e| ctx(e.to_string()))?;
            client.q_iterations += 1;
            client.q_momentum.update(client.q_prompt.as_slice(), client.q_iterations)?;
            stats.loss_q += lq.total;
            stats.loss_q_count += 1;
            stats.clamps += lq.clamps.0;
        }

        let routes = if !use_d {
            vec![0; batch.len()]
        } else {
            match opts.routing {
                Routing::Learned => {
                    let texts = query_text_embeddings(&client.q_prompt, &bank, frozen)?;
                    route_with(&texts, frozen, &batch)?
                }
                Routing::Static => route_with(static_query.ok_or_else(|| ctx("missing static query table".into()))?, frozen, &batch)?,
                Routing::DomainLabels => batch.iter().map(|s| s.domain).collect(),
            }
        };
        if use_d {
            for (s, &r) in batch.iter().zip(&routes) {
                stats.query_total += 1;
                stats.query_correct += usize::from(s.domain == r);
                stats.routed[r] += 1;
            }
        }

        let lo = local_objective(&bank, frozen, &batch, opts.lambda, &routes, &opts.objective)
            .map_err(|e| ctx(e.to_string()))?;
        if !lo.report.total.is_finite() {
            return Err(ctx(format!("non-finite loss {}", lo.report.total)));
        }
        if opts.objective.global_weight != 0.0 {
            client
                .adam_g
                .step(bank.g_prompt.as_mut_slice(), lo.grad_g.as_slice(), "g_prompt")
                .map_err(|e| ctx(e.to_string()))?;
        }
        for (m, grad) in lo.grad_d.iter().enumerate() {
            if let Some(grad) = grad {
                client.adam_d[m]
                    .step(bank.d_prompts[m].tokens.as_mut_slice(), grad.as_slice(), &format!("d_prompt:{m}"))
                    .map_err(|e| ctx(e.to_string()))?;
                touched[m] = true;
            }
        }
        stats.iterations += 1;
        stats.loss_g += lo.report.loss_g;
        if use_d {
            stats.loss_d += lo.report.loss_d_mean;
            stats.loss_d_count += 1;
        }
        stats.clamps += lo.report.clamps;
    }

    let update = ClientUpdate {
        client_id: id,
        round,
        d_prompts: bank.d_tokens(),
        g_prompt: bank.g_prompt,
        touched,
        num_samples: client.num_samples(),
    };
    Ok((update, stats))
}
