use crate::draft::{DraftContext, DraftModel, DraftProposal, DraftSession};
use crate::error::{Error, Result};
use crate::numerics::{sample_categorical, Matrix, ProbVector, SeededRng};
use crate::target::{flops_of_forward, KvCache, TargetModel, TokenId};

/// Anything that can propose `K` tokens per round.
pub trait Drafter {
    type Session;

    fn draft_len(&self) -> usize;

    fn passes_per_round(&self) -> usize;

    /// Per-prompt setup, done once after the target prefill.
    fn begin(&self, target: &TargetModel, ctx: &DraftContext) -> Result<Self::Session>;

    fn propose(
        &self,
        target: &TargetModel,
        session: &mut Self::Session,
        ctx: &DraftContext,
        temperature: f64,
        rng: &mut SeededRng,
    ) -> Result<DraftProposal>;
}

impl Drafter for DraftModel {
    type Session = DraftSession;

    fn draft_len(&self) -> usize {
        self.config().draft_len
    }

    fn passes_per_round(&self) -> usize {
        self.config().passes_per_round()
    }

    fn begin(&self, _target: &TargetModel, ctx: &DraftContext) -> Result<DraftSession> {
        DraftModel::begin(self, ctx)
    }

    fn propose(
        &self,
        target: &TargetModel,
        session: &mut DraftSession,
        ctx: &DraftContext,
        temperature: f64,
        rng: &mut SeededRng,
    ) -> Result<DraftProposal> {
        DraftModel::propose(self, target, session, ctx, temperature, rng)
    }
}

/// Test rig: the target drafts for itself, one token per pass. Its draft
/// laws equal the verifier's, so every token is accepted.
#[derive(Clone, Copy, Debug)]
pub struct SelfDrafter {
    pub draft_len: usize,
}

impl Drafter for SelfDrafter {
    type Session = KvCache;

    fn draft_len(&self) -> usize {
        self.draft_len
    }

    fn passes_per_round(&self) -> usize {
        self.draft_len
    }

    fn begin(&self, target: &TargetModel, ctx: &DraftContext) -> Result<KvCache> {
        if self.draft_len == 0 {
            return Err(Error::InvalidConfig("draft_len must be positive".into()));
        }
        Ok(target.encode_prompt(ctx.prompt, 1.0)?.2)
    }

    fn propose(
        &self,
        target: &TargetModel,
        cache: &mut KvCache,
        ctx: &DraftContext,
        temperature: f64,
        rng: &mut SeededRng,
    ) -> Result<DraftProposal> {
        let n = ctx.visual_len();
        let m = ctx.committed();
        if cache.len() > m {
            cache.truncate(m);
        }
        while cache.len() < m {
            let p = cache.len();
            target.step(cache, ctx.text_tokens[p - n], 1.0)?;
        }
        let mut last = *ctx.text_tokens.last().ok_or(Error::EmptyInput)?;
        let mut tokens = Vec::with_capacity(self.draft_len);
        let mut dists = Vec::with_capacity(self.draft_len);
        let mut flops = 0;
        for _ in 0..self.draft_len {
            flops += flops_of_forward(target.config(), cache.len(), 1);
            let p = target.step(cache, last, temperature)?;
            last = sample_categorical(&p, rng)?;
            tokens.push(last);
            dists.push(p);
        }
        let features = cache.features().slice_rows(m, cache.len());
        let sequence_len = cache.len();
        cache.truncate(m);
        Ok(DraftProposal {
            tokens,
            dists,
            features,
            forward_passes: self.draft_len,
            flops,
            sequence_len,
        })
    }
}

/// Test rig: proposes a fixed token sequence with fixed laws, ignoring
/// context. Useful for forcing rejections at chosen positions.
#[derive(Clone, Debug)]
pub struct ScriptedDrafter {
    pub proposals: Vec<(TokenId, ProbVector)>,
}

impl Drafter for ScriptedDrafter {
    type Session = ();

    fn draft_len(&self) -> usize {
        self.proposals.len()
    }

    fn passes_per_round(&self) -> usize {
        1
    }

    fn begin(&self, _target: &TargetModel, _ctx: &DraftContext) -> Result<()> {
        Ok(())
    }

    fn propose(
        &self,
        target: &TargetModel,
        _session: &mut (),
        _ctx: &DraftContext,
        _temperature: f64,
        _rng: &mut SeededRng,
    ) -> Result<DraftProposal> {
        Ok(DraftProposal {
            tokens: self.proposals.iter().map(|(t, _)| *t).collect(),
            dists: self.proposals.iter().map(|(_, p)| p.clone()).collect(),
            features: Matrix::zeros(self.proposals.len(), target.config().d_model),
            forward_passes: 1,
            flops: 0,
            sequence_len: 0,
        })
    }
}
