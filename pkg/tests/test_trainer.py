import io
import json
import math
import random

import pytest
import torch

import crossclone.checkpoint as checkpoint_module
from crossclone.adversarial import GrlConfig, grl_lambda
from crossclone.cloneloss import LossWeights
from crossclone.corpus import gen_synthetic
from crossclone.encoder import cosine
from crossclone.errors import CheckpointError, ConfigError
from crossclone.trainer import (
    ScheduleConfig,
    TrainState,
    checkpoint_load,
    checkpoint_save,
    run_adversarial_stage,
    run_csp_stage,
    run_training,
)


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(8, ["dA", "dB"], seed=1, variants_per_dialect=2)


def _schedule(**overrides):
    defaults = dict(
        csp_steps=6,
        adversarial_steps=6,
        batch_size=6,
        lr=1e-3,
        source_lang="dA",
        target_lang="dB",
    )
    defaults.update(overrides)
    return ScheduleConfig(**defaults)


def _snapshot(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def _same(snapshot, module):
    current = module.state_dict()
    return all(torch.equal(snapshot[k], current[k]) for k in snapshot)


def _train(corpus, schedule, seed=0, stage="all", state=None):
    buf = io.StringIO()
    state = run_training(corpus, schedule, seed=seed, metrics_out=buf, state=state,
                         stage=stage, d_model=32)
    return state, buf.getvalue()


class TestCspStage:
    def test_zero_steps_is_noop(self, corpus):
        schedule = _schedule(csp_steps=0)
        state = TrainState.initialize(corpus, schedule, seed=0, d_model=32)
        before = _snapshot(state.encoder)
        run_csp_stage(corpus, state)
        assert _same(before, state.encoder)
        assert state.step == 0

    def test_determinism_replay(self, corpus):
        schedule = _schedule(csp_steps=20, adversarial_steps=0)
        _, m1 = _train(corpus, schedule, seed=5, stage="csp")
        _, m2 = _train(corpus, schedule, seed=5, stage="csp")
        assert m1 == m2
        last = json.loads(m1.splitlines()[-1])
        assert last["step"] == 19

    def test_metrics_content(self, corpus):
        schedule = _schedule(csp_steps=3, adversarial_steps=0)
        _, metrics = _train(corpus, schedule, stage="csp")
        lines = [json.loads(l) for l in metrics.splitlines()]
        assert [l["step"] for l in lines] == [0, 1, 2]
        for line in lines:
            assert line["stage"] == "csp"
            assert set(line["queue_fill"]) == {"dA", "dB"}
            assert math.isfinite(line["loss"])

    def test_heads_untouched(self, corpus):
        schedule = _schedule(csp_steps=5, adversarial_steps=0)
        state = TrainState.initialize(corpus, schedule, seed=0, d_model=32)
        head = _snapshot(state.domain_head)
        h = _snapshot(state.mapper_h)
        p = _snapshot(state.mapper_p)
        encoder = _snapshot(state.encoder)
        run_csp_stage(corpus, state)
        assert _same(head, state.domain_head)
        assert _same(h, state.mapper_h) and _same(p, state.mapper_p)
        assert not _same(encoder, state.encoder)  # the encoder did move

    def test_queue_language_purity(self, corpus):
        schedule = _schedule(csp_steps=8, adversarial_steps=0)
        state, _ = _train(corpus, schedule, stage="csp")
        language_of = {p.id: p.language for p in corpus}
        for lang, queue in state.queues.items():
            assert queue.entries
            assert all(language_of[e.source_id] == lang for e in queue.entries)

    def test_separation_statistic(self, corpus):
        schedule = _schedule(csp_steps=50, adversarial_steps=0, batch_size=12)
        state, _ = _train(corpus, schedule, seed=3, stage="csp")
        rng = random.Random(0)
        by_lang = {}
        for p in corpus:
            by_lang.setdefault(p.language, []).append(p)
        neighbor, unrelated = [], []
        for program in corpus:
            texts = [s.text for s in program.snippets]
            embs = state.embed_snippet_texts(texts)
            center = len(texts) // 2
            for f in range(max(0, center - 2), min(len(texts), center + 3)):
                if f != center:
                    neighbor.append(float(cosine(embs[center], embs[f])))
            other = rng.choice([p for p in by_lang[program.language] if p.id != program.id])
            other_emb = state.embed_snippet_texts([rng.choice(other.snippets).text])[0]
            unrelated.append(float(cosine(embs[center], other_emb)))
        assert sum(neighbor) / len(neighbor) > sum(unrelated) / len(unrelated)

    def test_csp_after_adversarial_rejected(self, corpus):
        schedule = _schedule(csp_steps=2, adversarial_steps=2)
        state, _ = _train(corpus, schedule)
        with pytest.raises(ConfigError):
            run_csp_stage(corpus, state)


class TestAdversarialStage:
    def test_ablation_degeneracy(self, corpus):
        schedule = _schedule(
            csp_steps=0, enable_csp=False, enable_dal=False, enable_cycle=False,
            weights=LossWeights(alpha=0.0, beta=0.0),
        )
        _, metrics = _train(corpus, schedule)
        for line in metrics.splitlines():
            record = json.loads(line)
            assert abs(record["loss_total"] - record["loss_clone"]) <= 1e-9
            assert "loss_domain" not in record and "loss_cycle" not in record

    def test_determinism_replay(self, corpus):
        schedule = _schedule()
        _, m1 = _train(corpus, schedule, seed=9)
        _, m2 = _train(corpus, schedule, seed=9)
        assert m1 == m2

    def test_lambda_follows_schedule(self, corpus):
        schedule = _schedule(csp_steps=0, enable_csp=False, adversarial_steps=10, mu=0.7)
        _, metrics = _train(corpus, schedule)
        lines = [json.loads(l) for l in metrics.splitlines()]
        assert [l["step"] for l in lines] == list(range(10))
        for line in lines:
            expected = grl_lambda(GrlConfig(mu=0.7, total_steps=10, step=line["step"]))
            assert line["lambda"] == expected

    def test_queues_not_mutated(self, corpus):
        schedule = _schedule(csp_steps=4, adversarial_steps=4)
        state = TrainState.initialize(corpus, schedule, seed=0, d_model=32)
        run_csp_stage(corpus, state)
        frozen = {
            lang: [(e.source_id, e.embedding.clone()) for e in q.entries]
            for lang, q in state.queues.items()
        }
        run_adversarial_stage(corpus, state)
        for lang, entries in frozen.items():
            now = state.queues[lang].entries
            assert len(now) == len(entries)
            for (source_id, emb), entry in zip(entries, now):
                assert entry.source_id == source_id
                assert torch.equal(entry.embedding, emb)

    def test_batch_divisibility_enforced(self, corpus):
        schedule = _schedule(csp_steps=0, enable_csp=False, batch_size=8)
        state = TrainState.initialize(corpus, schedule, seed=0, d_model=32)
        with pytest.raises(ConfigError, match="divisible by 3"):
            run_adversarial_stage(corpus, state)

    def test_missing_language_rejected(self, corpus):
        schedule = _schedule(csp_steps=0, enable_csp=False, target_lang="ruby")
        state = TrainState.initialize(corpus, schedule, seed=0, d_model=32)
        with pytest.raises(ConfigError, match="ruby"):
            run_adversarial_stage(corpus, state)

    def test_metrics_have_all_components(self, corpus):
        schedule = _schedule(csp_steps=2, adversarial_steps=2)
        _, metrics = _train(corpus, schedule)
        last = json.loads(metrics.splitlines()[-1])
        for key in ("loss_clone", "loss_domain", "loss_cycle", "loss_total", "lambda", "domain_acc"):
            assert key in last


class TestCheckpointing:
    def test_round_trip_eval_bit_exact(self, corpus, tmp_path):
        schedule = _schedule(csp_steps=3, adversarial_steps=3)
        state, _ = _train(corpus, schedule)
        path = tmp_path / "state.ckpt"
        checkpoint_save(state, path)
        loaded = checkpoint_load(path)
        assert torch.equal(state.embed_programs(corpus[:5]), loaded.embed_programs(corpus[:5]))
        assert loaded.stage == state.stage and loaded.step == state.step

    def test_save_load_save_byte_stable(self, corpus, tmp_path):
        schedule = _schedule(csp_steps=2, adversarial_steps=2)
        state, _ = _train(corpus, schedule)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint_save(state, p1)
        checkpoint_save(checkpoint_load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_checksum_error(self, corpus, tmp_path):
        schedule = _schedule(csp_steps=1, adversarial_steps=0)
        state, _ = _train(corpus, schedule, stage="csp")
        path = tmp_path / "state.ckpt"
        checkpoint_save(state, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="checksum|truncated"):
            checkpoint_load(path)

    def test_version_mismatch(self, corpus, tmp_path, monkeypatch):
        schedule = _schedule(csp_steps=1, adversarial_steps=0)
        state, _ = _train(corpus, schedule, stage="csp")
        path = tmp_path / "state.ckpt"
        monkeypatch.setattr(checkpoint_module, "FORMAT_VERSION", 999)
        checkpoint_save(state, path)
        monkeypatch.undo()
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(path)

    def test_resume_equivalence_csp(self, corpus, tmp_path):
        schedule = _schedule(csp_steps=6, adversarial_steps=0)
        buf_full = io.StringIO()
        state_full = TrainState.initialize(corpus, schedule, seed=4, d_model=32)
        run_csp_stage(corpus, state_full, metrics_out=buf_full)

        state_half = TrainState.initialize(corpus, schedule, seed=4, d_model=32)
        run_csp_stage(corpus, state_half, until_step=3)
        path = tmp_path / "half.ckpt"
        checkpoint_save(state_half, path)
        resumed = checkpoint_load(path)
        buf_resumed = io.StringIO()
        run_csp_stage(corpus, resumed, metrics_out=buf_resumed)

        full = {json.loads(l)["step"]: json.loads(l)["loss"] for l in buf_full.getvalue().splitlines()}
        tail = {json.loads(l)["step"]: json.loads(l)["loss"] for l in buf_resumed.getvalue().splitlines()}
        assert set(tail) == {3, 4, 5}
        for step, loss in tail.items():
            assert abs(loss - full[step]) <= 1e-9

    def test_resume_equivalence_adversarial(self, corpus, tmp_path):
        schedule = _schedule(csp_steps=2, adversarial_steps=6)
        buf_full = io.StringIO()
        state_full = TrainState.initialize(corpus, schedule, seed=8, d_model=32)
        run_csp_stage(corpus, state_full)
        run_adversarial_stage(corpus, state_full, metrics_out=buf_full)

        state_half = TrainState.initialize(corpus, schedule, seed=8, d_model=32)
        run_csp_stage(corpus, state_half)
        run_adversarial_stage(corpus, state_half, until_step=3)
        path = tmp_path / "half.ckpt"
        checkpoint_save(state_half, path)
        resumed = checkpoint_load(path)
        buf_resumed = io.StringIO()
        run_adversarial_stage(corpus, resumed, metrics_out=buf_resumed)

        full = {
            json.loads(l)["step"]: json.loads(l)["loss_total"]
            for l in buf_full.getvalue().splitlines()
        }
        tail = {
            json.loads(l)["step"]: json.loads(l)["loss_total"]
            for l in buf_resumed.getvalue().splitlines()
        }
        assert set(tail) == {3, 4, 5}
        for step, loss in tail.items():
            assert abs(loss - full[step]) <= 1e-9


class TestRunTraining:
    def test_stage_transition_resets_step(self, corpus):
        schedule = _schedule(csp_steps=4, adversarial_steps=3)
        state, _ = _train(corpus, schedule)
        assert state.stage == "adversarial"
        assert state.step == 3
        assert state.heads_registered

    def test_no_csp_flag_skips_stage(self, corpus):
        schedule = _schedule(enable_csp=False)
        state, metrics = _train(corpus, schedule)
        stages = {json.loads(l)["stage"] for l in metrics.splitlines()}
        assert stages == {"adversarial"}
        assert state.queues == {}

    def test_full_run_determinism(self, corpus):
        schedule = _schedule(csp_steps=4, adversarial_steps=4)
        state1, m1 = _train(corpus, schedule, seed=2)
        state2, m2 = _train(corpus, schedule, seed=2)
        assert m1 == m2
        assert torch.equal(
            state1.embed_programs(corpus[:4]), state2.embed_programs(corpus[:4])
        )
