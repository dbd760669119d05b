import math

import pytest

from lrdecay import autodecay as ad
from lrdecay.errors import InvalidTransitionError, ValidationError


def g_hat_after_drop(t, hi=2.0, lo=1.0, beta=0.9):
    """Corrected average for a stream ``hi`` then ``lo`` forever, in closed form."""
    f = (1 - beta) * beta ** (t - 1) * hi + (1 - beta ** (t - 1)) * lo
    return f / (1 - beta**t)


class TestPredicates:
    def test_stable(self):
        assert ad.is_stable([1.0, 1.01, 1.0], 0.02, 1e-8)
        assert not ad.is_stable([1.0, 1.05], 0.02, 1e-8)

    def test_short_window_never_stable(self):
        assert not ad.is_stable([1.0] * 9, 0.02, 1e-8, window_w=10)
        assert ad.is_stable([1.0] * 10, 0.02, 1e-8, window_w=10)

    def test_strict_inequality(self):
        assert not ad.is_stable([1.0, 1.5], 0.5, 0.0)

    def test_drop(self):
        assert ad.has_significant_drop(0.9, 1.0, 0.9, 0.0)
        assert not ad.has_significant_drop(0.95, 1.0, 0.9, 0.0)


class TestConfig:
    def test_defaults(self):
        c = ad.AutoDecayConfig()
        assert (c.beta, c.window_w, c.eta_tol, c.zeta, c.eps, c.decay_factor, c.min_lr) == (
            0.9, 10, 0.02, 0.9, 1e-8, 10.0, 1e-5,
        )

    @pytest.mark.parametrize(
        "kw", [{"beta": 1.0}, {"window_w": 1}, {"eta_tol": 0}, {"zeta": 1.0}, {"decay_factor": 1.0}, {"min_lr": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            ad.AutoDecayConfig(**kw)


class TestStateMachine:
    def test_constant_stream_terminates_at_w(self):
        cfg = ad.AutoDecayConfig()
        ctl = ad.AutoDecay(cfg, 0.1)
        actions = [ctl.step(1.0).action for _ in range(cfg.window_w)]
        assert actions == [ad.CONTINUE] * (cfg.window_w - 1) + [ad.TERMINATE]
        assert ctl.terminated and ctl.lr == 0.1 and ctl.stage == 1
        with pytest.raises(InvalidTransitionError):
            ctl.step(1.0)

    def test_drop_then_plateau(self):
        cfg = ad.AutoDecayConfig()
        # First epoch where the last ten closed-form values are within 2%.
        t_decay = next(
            t for t in range(cfg.window_w, 500)
            if (g_hat_after_drop(t - cfg.window_w + 1) - g_hat_after_drop(t)) / g_hat_after_drop(t) < cfg.eta_tol
        )
        state = ad.initial_state(cfg, 0.5)
        stream = [2.0] + [1.0] * 200
        decisions = []
        for loss in stream:
            state, d = ad.observe(state, cfg, loss)
            decisions.append(d)
            if d.action == ad.DECAY:
                assert state.edma.t == 0 and state.window == () and state.g_ref is None
                assert state.stage == 2 and state.current_lr == pytest.approx(0.05)
            if d.action == ad.TERMINATE:
                break
        actions = [d.action for d in decisions]
        assert actions.count(ad.DECAY) == 1
        assert actions.index(ad.DECAY) + 1 == t_decay
        assert decisions[t_decay - 1].new_lr == pytest.approx(0.05)
        # Stage two sees a constant stream: terminate W epochs after the reset.
        assert len(actions) == t_decay + cfg.window_w
        assert actions[-1] == ad.TERMINATE

    def test_g_ref_is_first_value_of_stage(self):
        cfg = ad.AutoDecayConfig()
        state = ad.initial_state(cfg, 0.1)
        state, _ = ad.observe(state, cfg, 3.0)
        state, _ = ad.observe(state, cfg, 1.0)
        assert state.g_ref == 3.0

    def test_min_lr_turns_decay_into_terminate(self):
        cfg = ad.AutoDecayConfig(min_lr=0.01)
        ctl = ad.AutoDecay(cfg, 0.05)
        actions = []
        for x in [2.0] + [1.0] * 200:
            actions.append(ctl.step(x).action)
            if ctl.terminated:
                break
        assert ad.DECAY not in actions
        assert actions[-1] == ad.TERMINATE and len(actions) < 201

    def test_rejects_non_finite(self):
        cfg = ad.AutoDecayConfig()
        with pytest.raises(ValidationError):
            ad.observe(ad.initial_state(cfg, 0.1), cfg, math.inf)

    def test_deterministic(self):
        stream = [2.0 / (1 + 0.1 * k) + 0.01 * ((k * 7) % 3) for k in range(300)]

        def actions():
            ctl = ad.AutoDecay(ad.AutoDecayConfig(), 0.1)
            out = []
            for x in stream:
                out.append(ctl.step(x).action)
                if ctl.terminated:
                    break
            return out

        first = actions()
        assert all(actions() == first for _ in range(20))

    def test_trace(self, tmp_path):
        ctl = ad.AutoDecay(ad.AutoDecayConfig(), 0.1)
        for _ in range(10):
            ctl.step(1.0)
        path = tmp_path / "trace.csv"
        ctl.write_trace(path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(ad.TRACE_COLUMNS)
        assert lines[-1].endswith("terminate,0.1,1")
        assert len(lines) == 11
