"""Two-stage training orchestration: snippet-contrast pre-training followed by
adversarial clone fine-tuning, with deterministic per-step seeding,
checkpointing, and ablation switches.

Every step reseeds the torch and python RNGs from sha256(seed, stage, step),
so a resumed run consumes exactly the randomness the uninterrupted run would
have, and fixed-seed reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import torch

from .adversarial import (
    GrlConfig,
    build_domain_head,
    domain_logits,
    domain_loss,
    grl_apply,
    grl_lambda,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .cloneloss import LossWeights, clone_loss, total_loss
from .corpus import Program, make_windows, sample_clone_batch
from .csp import (
    WARMUP_MIN_ENTRIES,
    CspBatch,
    LanguageQueue,
    QueueEntry,
    csp_loss,
    queue_push,
    sample_negatives,
)
from .cycle import build_mapper, cycle_loss
from .encoder import (
    EncoderConfig,
    Vocabulary,
    build_encoder,
    cosine_matrix,
    encode_batch,
    tokenize,
)
from .errors import CheckpointError, ConfigError, SamplingError

_EMBED_CHUNK = 64
_STATE_KIND = "crossclone-train-state"
_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64"}

# Queue negatives join the loss only while the batch geometry is spread out
# (mean pairwise cosine below this). A freshly initialized CLS space is
# nearly collinear, and feeding it stale queue entries traps it there; fresh
# in-batch negatives alone drive the de-collapse, after which the queue pool
# behaves as intended.
_QUEUE_COSINE_GATE = 0.9


@dataclass
class ScheduleConfig:
    """Hyperparameters for both stages plus the ablation switches."""

    csp_steps: int = 300
    adversarial_steps: int = 300
    batch_size: int = 32
    lr: float = 2e-5
    adversarial_lr: float = 0.0  # 0 = same as lr
    weight_decay: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    enable_csp: bool = True
    enable_dal: bool = True
    enable_cycle: bool = True
    window_size: int = 5
    queue_size: int = 128
    csp_negatives: int = 16
    csp_tau: float = 0.05
    mu: float = 0.01
    source_lang: str = ""
    target_lang: str = ""
    clone_pairs: int = 0  # 0 = one pair per batch slot (batch_size pairs)
    head_lr_scale: float = 5.0
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.csp_steps < 0 or self.adversarial_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.window_size < 2:
            raise ConfigError(f"window_size must be >= 2, got {self.window_size}")
        if self.queue_size < 1 or self.csp_negatives < 1:
            raise ConfigError("queue_size and csp_negatives must be >= 1")
        if self.csp_tau <= 0:
            raise ConfigError(f"csp_tau must be > 0, got {self.csp_tau}")
        if self.mu <= 0:
            raise ConfigError(f"mu must be > 0, got {self.mu}")
        if self.clone_pairs < 0:
            raise ConfigError("clone_pairs must be >= 0 (0 means batch_size)")
        if self.head_lr_scale <= 0:
            raise ConfigError("head_lr_scale must be > 0")
        if self.adversarial_lr < 0:
            raise ConfigError("adversarial_lr must be >= 0 (0 means lr)")

    @property
    def effective_adversarial_lr(self) -> float:
        return self.adversarial_lr or self.lr

    @property
    def window_radius(self) -> int:
        return max(1, self.window_size // 2)

    @property
    def effective_clone_pairs(self) -> int:
        return self.clone_pairs or self.batch_size


def _step_seed(seed: int, stage: str, step: int) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}:{step}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


class TrainState:
    """Everything a run owns: encoder, auxiliary heads, optimizer, counters.

    The optimizer spans both stages; the domain head and cycle mappers exist
    from the start but join its parameter set only when the adversarial stage
    begins, so the pre-training stage cannot touch them.
    """

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        schedule: ScheduleConfig,
        vocab: Vocabulary,
        seed: int,
        n_domains: int = 2,
        dtype: torch.dtype = torch.float32,
    ):
        if encoder_cfg.vocab_size != len(vocab):
            raise ConfigError("encoder vocab_size must match the vocabulary")
        self.encoder_cfg = encoder_cfg
        self.schedule = schedule
        self.vocab = vocab
        self.seed = seed
        self.dtype = dtype
        self.encoder = build_encoder(encoder_cfg, dtype)
        self.domain_head = build_domain_head(
            encoder_cfg.d_model, n_domains, seed=encoder_cfg.seed + 1, dtype=dtype
        )
        self.mapper_h = build_mapper(encoder_cfg.d_model, seed=encoder_cfg.seed + 2, dtype=dtype)
        self.mapper_p = build_mapper(encoder_cfg.d_model, seed=encoder_cfg.seed + 3, dtype=dtype)
        self.optimizer = torch.optim.AdamW(
            self.encoder.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay
        )
        self.step = 0
        self.stage = "csp"
        self.heads_registered = False
        self.queues: dict[str, LanguageQueue] = {}

    @classmethod
    def initialize(
        cls,
        programs: Sequence[Program],
        schedule: ScheduleConfig,
        seed: int = 0,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        max_len: int = 512,
        dropout: float = 0.1,
        n_domains: int = 2,
        dtype: torch.dtype = torch.float32,
    ) -> "TrainState":
        vocab = Vocabulary.from_programs(programs)
        encoder_cfg = EncoderConfig(
            vocab_size=len(vocab),
            d_model=d_model,
            n_layers=n_layers,
            n_heads=n_heads,
            max_len=max_len,
            dropout=dropout,
            seed=seed,
        )
        return cls(encoder_cfg, schedule, vocab, seed, n_domains=n_domains, dtype=dtype)

    def begin_adversarial_stage(self) -> None:
        """Switch optimization over to the fine-tuning stage.

        The optimizer is rebuilt: carrying the pre-training stage's Adam
        moments into the new objectives mis-scales the early fine-tuning
        steps badly (measured as a large retrieval regression), so parameters
        continue but optimizer state does not. The head/mapper group runs at
        a scaled lr because fresh heads learn faster than the warm encoder.
        """
        if self.heads_registered:
            return
        stage_lr = self.schedule.effective_adversarial_lr
        self.optimizer = torch.optim.AdamW(
            self.encoder.parameters(),
            lr=stage_lr,
            weight_decay=self.schedule.weight_decay,
        )
        params = (
            list(self.domain_head.parameters())
            + list(self.mapper_h.parameters())
            + list(self.mapper_p.parameters())
        )
        self.optimizer.add_param_group(
            {"params": params, "lr": stage_lr * self.schedule.head_lr_scale}
        )
        self.heads_registered = True

    def _modules(self):
        return (self.encoder, self.domain_head, self.mapper_h, self.mapper_p)

    def _set_train(self, train: bool) -> None:
        for module in self._modules():
            module.train(train)

    def _encode_texts(self, texts: Sequence[str], train: bool) -> torch.Tensor:
        sequences = [tokenize(t, self.vocab, self.encoder_cfg.max_len) for t in texts]
        self._set_train(train)
        chunks = []
        if train:
            for start in range(0, len(sequences), _EMBED_CHUNK):
                chunks.append(encode_batch(self.encoder, sequences[start : start + _EMBED_CHUNK]))
        else:
            with torch.no_grad():
                for start in range(0, len(sequences), _EMBED_CHUNK):
                    chunks.append(
                        encode_batch(self.encoder, sequences[start : start + _EMBED_CHUNK])
                    )
        return torch.cat(chunks) if len(chunks) > 1 else chunks[0]

    def embed_programs(self, programs: Sequence[Program], train: bool = False) -> torch.Tensor:
        return self._encode_texts([p.code for p in programs], train)

    def embed_snippet_texts(self, texts: Sequence[str], train: bool = False) -> torch.Tensor:
        return self._encode_texts(list(texts), train)

    def clip_parameters(self) -> list[torch.nn.Parameter]:
        return [p for group in self.optimizer.param_groups for p in group["params"]]


def _emit(metrics_out: IO | None, record: dict) -> None:
    if metrics_out is not None:
        metrics_out.write(json.dumps(record) + "\n")


def run_csp_stage(
    programs: Sequence[Program],
    state: TrainState,
    metrics_out: IO | None = None,
    checkpoint_path=None,
    until_step: int | None = None,
) -> TrainState:
    """Snippet-contrast pre-training over every language in the corpus.

    Each step samples snippet windows, encodes centers and one functional
    neighbor apiece, assembles language-pure negatives, takes one optimizer
    step, and pushes the detached center/positive embeddings into their
    queue. Negatives mix queue draws with the current batch's same-language
    rows from other programs; queue draws are gated on both the warm-up fill
    threshold and a de-collapsed batch geometry (see _QUEUE_COSINE_GATE) so
    that a from-scratch encoder first organizes itself against fresh
    negatives before the replayed pool joins.
    ``until_step`` pauses the stage early (resume later from a checkpoint).
    """
    cfg = state.schedule
    if state.stage != "csp":
        raise ConfigError("snippet-contrast pre-training must precede the adversarial stage")
    stop = cfg.csp_steps if until_step is None else min(until_step, cfg.csp_steps)
    if cfg.csp_steps == 0 or state.step >= stop:
        return state

    window_pool: list[tuple[Program, object]] = []
    for program in programs:
        if len(program.snippets) >= 2:
            for window in make_windows(program, cfg.window_radius):
                window_pool.append((program, window))
    if not window_pool:
        raise ConfigError("corpus has no snippet windows (nothing to pre-train on)")
    for lang in sorted({program.language for program, _ in window_pool}):
        state.queues.setdefault(lang, LanguageQueue(language=lang, capacity=cfg.queue_size))
    encoder_params = list(state.encoder.parameters())

    for t in range(state.step, stop):
        step_seed = _step_seed(state.seed, "csp", t)
        torch.manual_seed(step_seed)
        rng = random.Random(step_seed)

        batch = [window_pool[rng.randrange(len(window_pool))] for _ in range(cfg.batch_size)]
        center_texts = [prog.snippets[w.center_index].text for prog, w in batch]
        positive_texts = [
            prog.snippets[rng.choice(w.functional_indices)].text for prog, w in batch
        ]
        centers = state.embed_snippet_texts(center_texts, train=True)
        positives = state.embed_snippet_texts(positive_texts, train=True)
        batch_langs = [prog.language for prog, _ in batch]
        batch_sources = [prog.id for prog, _ in batch]

        with torch.no_grad():
            pairwise = cosine_matrix(centers, centers)
            n_rows = pairwise.size(0)
            off_diagonal = (pairwise.sum() - pairwise.diagonal().sum()) / max(
                1, n_rows * (n_rows - 1)
            )
            queues_ready = float(off_diagonal) < _QUEUE_COSINE_GATE

        kept: list[int] = []
        negatives: list[list[torch.Tensor]] = []
        for i, (prog, _) in enumerate(batch):
            queue = state.queues[prog.language]
            negs = [
                row[j].detach()
                for row in (centers, positives)
                for j in range(len(batch))
                if batch_langs[j] == prog.language and batch_sources[j] != prog.id
            ]
            if queues_ready and queue.fill() >= WARMUP_MIN_ENTRIES:
                drawn, _short = sample_negatives(
                    queue, cfg.csp_negatives, exclude=prog.id, rng=rng
                )
                negs += drawn
            if negs:
                kept.append(i)
                negatives.append(negs)
        if not kept:
            raise SamplingError(f"step {t}: no center has an eligible negative")

        csp_batch = CspBatch(
            centers=centers[kept],
            positives=positives[kept],
            languages=[batch_langs[i] for i in kept],
            source_ids=[batch_sources[i] for i in kept],
            temperature=cfg.csp_tau,
        )
        loss = csp_loss(csp_batch, negatives)
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(encoder_params, cfg.grad_clip)
        state.optimizer.step()

        for i, (prog, _) in enumerate(batch):
            queue_push(
                state.queues[prog.language],
                torch.stack([centers[i].detach(), positives[i].detach()]),
                [prog.id, prog.id],
            )
        state.step = t + 1

        if t % cfg.log_every == 0 or state.step == cfg.csp_steps:
            _emit(
                metrics_out,
                {
                    "stage": "csp",
                    "step": t,
                    "loss": loss.item(),
                    "queue_fill": {
                        lang: state.queues[lang].fill() for lang in sorted(state.queues)
                    },
                },
            )
        if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            checkpoint_save(state, checkpoint_path)
    return state


def run_adversarial_stage(
    programs: Sequence[Program],
    state: TrainState,
    metrics_out: IO | None = None,
    checkpoint_path=None,
    until_step: int | None = None,
) -> TrainState:
    """Clone fine-tuning with optional domain-adversarial and cycle terms.

    Per step: one monolingual clone batch plus a 1:2 source/target domain
    batch; the clone, (reversed-gradient) domain, and cycle losses combine
    into a single optimizer step over encoder, head, and mappers. The
    reversal schedule always spans the configured step count, regardless of
    ``until_step`` pauses.
    """
    cfg = state.schedule
    if state.stage != "adversarial":
        state.stage = "adversarial"
        state.step = 0
        state.begin_adversarial_stage()
    stop = cfg.adversarial_steps if until_step is None else min(until_step, cfg.adversarial_steps)
    if cfg.adversarial_steps == 0 or state.step >= stop:
        return state
    if cfg.batch_size % 3 != 0:
        raise ConfigError(
            f"adversarial stage needs batch_size divisible by 3, got {cfg.batch_size}"
        )
    if not cfg.source_lang or not cfg.target_lang:
        raise ConfigError("source_lang and target_lang must be configured")
    present = {p.language for p in programs}
    for lang in (cfg.source_lang, cfg.target_lang):
        if lang not in present:
            raise ConfigError(
                f"language {lang!r} not in corpus; available: {', '.join(sorted(present))}"
            )

    prog_by_id = {p.id: p for p in programs}
    clip_params = state.clip_parameters()

    for t in range(state.step, stop):
        step_seed = _step_seed(state.seed, "adversarial", t)
        torch.manual_seed(step_seed)
        rng = random.Random(step_seed)

        examples, domain_batch = sample_clone_batch(
            programs,
            cfg.batch_size,
            cfg.source_lang,
            cfg.target_lang,
            rng,
            n_pairs=cfg.effective_clone_pairs,
        )
        queries = [prog_by_id[e.query_program_id] for e in examples]
        candidates = [prog_by_id[e.candidate_program_id] for e in examples]
        q_emb = state.embed_programs(queries, train=True)
        c_emb = state.embed_programs(candidates, train=True)
        l_clone = clone_loss(q_emb, c_emb, list(range(len(examples))), cfg.weights.tau_clone)

        lam = grl_lambda(GrlConfig(mu=cfg.mu, total_steps=cfg.adversarial_steps, step=t))
        l_domain = None
        l_cycle = None
        acc = None
        if cfg.enable_dal or cfg.enable_cycle:
            labels = torch.tensor([label for _, label in domain_batch])
            d_emb = state.embed_programs([p for p, _ in domain_batch], train=True)
        if cfg.enable_dal:
            probs = domain_logits(grl_apply(d_emb, lam), state.domain_head)
            l_domain = domain_loss(probs, labels)
            acc = float((probs.argmax(dim=1) == labels).to(torch.float64).mean())
        if cfg.enable_cycle:
            l_cycle = cycle_loss(
                state.mapper_h, state.mapper_p, d_emb[labels == 0], d_emb[labels == 1]
            )

        total = total_loss(
            l_clone,
            l_domain if l_domain is not None else 0.0,
            l_cycle if l_cycle is not None else 0.0,
            cfg.weights,
        )
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(clip_params, cfg.grad_clip)
        state.optimizer.step()
        state.step = t + 1

        if t % cfg.log_every == 0 or state.step == cfg.adversarial_steps:
            record = {"stage": "adversarial", "step": t, "loss_clone": l_clone.item()}
            if cfg.enable_dal:
                record["lambda"] = lam
                record["loss_domain"] = l_domain.item()
                record["domain_acc"] = acc
            if cfg.enable_cycle:
                record["loss_cycle"] = l_cycle.item()
            record["loss_total"] = total.item()
            _emit(metrics_out, record)
        if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            checkpoint_save(state, checkpoint_path)
    return state


def run_training(
    programs: Sequence[Program],
    schedule: ScheduleConfig,
    seed: int = 0,
    metrics_out: IO | None = None,
    state: TrainState | None = None,
    stage: str = "all",
    checkpoint_path=None,
    **encoder_kwargs,
) -> TrainState:
    """Run the requested stage(s), honoring the ablation switches."""
    if stage not in ("csp", "adversarial", "all"):
        raise ConfigError(f"unknown stage {stage!r}")
    if state is None:
        state = TrainState.initialize(programs, schedule, seed=seed, **encoder_kwargs)
    if stage in ("csp", "all") and schedule.enable_csp:
        run_csp_stage(programs, state, metrics_out, checkpoint_path)
    if stage in ("adversarial", "all"):
        run_adversarial_stage(programs, state, metrics_out, checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# Checkpoint assembly
# ---------------------------------------------------------------------------


def _schedule_to_dict(cfg: ScheduleConfig) -> dict:
    return asdict(cfg)


def _schedule_from_dict(data: dict) -> ScheduleConfig:
    data = dict(data)
    data["weights"] = LossWeights(**data["weights"])
    return ScheduleConfig(**data)


def checkpoint_save(state: TrainState, path) -> None:
    """Serialize the full train state (including queues) with a checksum."""
    tensors: dict[str, torch.Tensor] = {}
    for prefix, module in (
        ("model.encoder", state.encoder),
        ("model.domain_head", state.domain_head),
        ("model.mapper_h", state.mapper_h),
        ("model.mapper_p", state.mapper_p),
    ):
        for key, value in module.state_dict().items():
            tensors[f"{prefix}.{key}"] = value

    opt_state = state.optimizer.state_dict()
    scalar_state: dict[str, dict] = {}
    for idx, entry in opt_state["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optim.{idx}.{key}"] = value
            else:
                scalar_state.setdefault(str(idx), {})[key] = value

    queue_meta = {}
    for lang, queue in state.queues.items():
        queue_meta[lang] = {
            "capacity": queue.capacity,
            "source_ids": [entry.source_id for entry in queue.entries],
        }
        if queue.entries:
            tensors[f"queue.{lang}"] = torch.stack([e.embedding for e in queue.entries])

    meta = {
        "kind": _STATE_KIND,
        "encoder_config": asdict(state.encoder_cfg),
        "schedule": _schedule_to_dict(state.schedule),
        "vocab": list(state.vocab.tokens),
        "seed": state.seed,
        "step": state.step,
        "stage": state.stage,
        "heads_registered": state.heads_registered,
        "n_domains": state.domain_head.n_domains,
        "dtype": _DTYPE_NAMES[state.dtype],
        "queues": queue_meta,
        "optimizer": {
            "param_groups": opt_state["param_groups"],
            "scalar_state": scalar_state,
        },
    }
    save_checkpoint(meta, tensors, path)


def checkpoint_load(path) -> TrainState:
    """Rebuild a TrainState; eval-mode behavior matches the saved state bit-exactly."""
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != _STATE_KIND:
        raise CheckpointError(f"not a train-state checkpoint: kind={meta.get('kind')!r}")
    dtype = {"float32": torch.float32, "float64": torch.float64}[meta["dtype"]]
    state = TrainState(
        EncoderConfig(**meta["encoder_config"]),
        _schedule_from_dict(meta["schedule"]),
        Vocabulary(tokens=tuple(meta["vocab"])),
        meta["seed"],
        n_domains=meta["n_domains"],
        dtype=dtype,
    )

    def module_state(prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

    state.encoder.load_state_dict(module_state("model.encoder"))
    state.domain_head.load_state_dict(module_state("model.domain_head"))
    state.mapper_h.load_state_dict(module_state("model.mapper_h"))
    state.mapper_p.load_state_dict(module_state("model.mapper_p"))
    if meta["heads_registered"]:
        state.begin_adversarial_stage()

    opt_entries: dict[int, dict] = {}
    for name, tensor in tensors.items():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            opt_entries.setdefault(int(idx), {})[key] = tensor
    for idx, entry in meta["optimizer"]["scalar_state"].items():
        opt_entries.setdefault(int(idx), {}).update(entry)
    state.optimizer.load_state_dict(
        {"state": opt_entries, "param_groups": meta["optimizer"]["param_groups"]}
    )

    for lang, qmeta in meta["queues"].items():
        queue = LanguageQueue(language=lang, capacity=qmeta["capacity"])
        source_ids = qmeta["source_ids"]
        if source_ids:
            stacked = tensors[f"queue.{lang}"]
            for row, source_id in zip(stacked, source_ids):
                queue.entries.append(QueueEntry(embedding=row, source_id=source_id))
        state.queues[lang] = queue

    state.step = meta["step"]
    state.stage = meta["stage"]
    return state
