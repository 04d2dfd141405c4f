import numpy as np
import pytest

from lph import adapter as A
from lph import backbones as B
from lph import pipeline as P
from lph import toyworld as W
from lph.schedule import build_ladder, build_linear_schedule
from lph.storage import checkpoint_checksum


@pytest.fixture(scope="module")
def mech_bundle():
    """Untrained-weights bundle for mechanical pipeline checks (trained
    flags set so the guard admits them)."""
    spaces = {"S": W.Autoencoder("S", 101), "T": W.Autoencoder("T", 202)}
    models = {k: B.Denoiser(k, 7) for k in B.KINDS}
    for m in models.values():
        m.trained = True
    schedule = build_linear_schedule()
    ladder = build_ladder(schedule, 30)
    return P.Bundle(spaces=spaces, models=models,
                    adapter_net=A.AdapterNet(preset="toy", seed=1),
                    schedule=schedule, ladder=ladder)


@pytest.fixture(scope="module")
def inst():
    return W.generate_instance(303)


class TestHandoverConfig:
    def test_defaults_valid(self):
        cfg = P.HandoverConfig()
        assert cfg.t_s + cfg.t_t >= cfg.t_total

    @pytest.mark.parametrize("t_s,t_t", [(-1, 30), (31, 0), (18, 31), (18, 11), (0, 29)])
    def test_invalid_rejected(self, t_s, t_t):
        with pytest.raises(P.PipelineError):
            P.HandoverConfig(t_s=t_s, t_t=t_t)

    def test_paper_grid(self):
        grid = P.paper_grid()
        assert set(grid) == {(0, 30), (30, 0), (6, 24), (12, 18), (18, 18), (24, 18)}
        for t_s, t_t in grid:
            if 0 < t_s < 30:
                assert t_t == max(18, 30 - t_s)


class TestPhases:
    def test_phase1_zero_steps_is_initial_draw(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=0, t_t=30, seed=5)
        rng = P._run_rng(5, inst, 1)
        expect = rng.standard_normal((4, 16, 16)).astype(np.float32)
        state = P.run_phase1(inst, 0, cfg, mech_bundle)
        assert np.array_equal(state.data, expect)
        assert state.space == "S"

    def test_phase1_step_count_and_timestep(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=12, t_t=18, seed=1)
        state = P.run_phase1(inst, 12, cfg, mech_bundle)
        assert state.t == mech_bundle.ladder.timestep_after(12)

    def test_pure_handover_identity(self, mech_bundle, inst):
        # T_t = T_total - T_s with incremental re-noise at equal abar:
        # output latent is exactly the adapted latent
        cfg = P.HandoverConfig(t_s=12, t_t=18, renoise_mode="incremental", seed=2)
        z = P.run_phase1(inst, 12, cfg, mech_bundle)
        adapted = A.adapt(mech_bundle.adapter_net, z)
        out = P.run_handover(z, cfg, mech_bundle, instance=inst)
        assert out.space == "T"
        assert np.array_equal(out.data, adapted.data)

    def test_extension_raises_start_noise(self, mech_bundle, inst):
        # raising t_t from 12 to 18 at fixed t_s strictly increases the
        # Phase-2 starting noise level 1 - abar
        sched = mech_bundle.schedule
        ladder = mech_bundle.ladder
        ab_12 = sched.alpha_bar(ladder.indices[30 - 12])
        ab_18 = sched.alpha_bar(ladder.indices[30 - 18])
        assert 1 - ab_18 > 1 - ab_12

    def test_bypass_differs(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=18, t_t=18, seed=3)
        z = P.run_phase1(inst, 18, cfg, mech_bundle)
        a = P.run_handover(z, cfg, mech_bundle, instance=inst)
        b = P.run_handover(z, cfg, mech_bundle, instance=inst, bypass_adapter=True)
        assert not np.array_equal(a.data, b.data)

    def test_phase2_composite_contract(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=18, t_t=18, seed=4)
        img, _ = P.run_lph(inst, cfg, mech_bundle)
        outside = ~inst.garment_mask_gt.astype(bool)
        assert np.array_equal(img[outside], inst.masked_person[outside])

    def test_phase2_wrong_space_rejected(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=18, t_t=18, seed=4)
        bad = W.LatentState(np.zeros((4, 16, 16), dtype=np.float32),
                            mech_bundle.ladder.indices[30 - 18], "S")
        with pytest.raises(P.PipelineError):
            P.run_phase2(bad, inst, 18, cfg, mech_bundle)


class TestFullRuns:
    def test_structure_only_dispatch_bitwise(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=30, t_t=0, seed=9)
        img, trace = P.run_lph(inst, cfg, mech_bundle)
        single = P.run_single("structure", inst, mech_bundle, seed=9)
        assert np.array_equal(img, single)
        assert trace["phase1_steps"] == 30 and trace["phase2_steps"] == 0

    def test_texture_only_dispatch_bitwise(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=0, t_t=30, seed=9)
        img, _ = P.run_lph(inst, cfg, mech_bundle)
        assert np.array_equal(img, P.run_single("texture", inst, mech_bundle, seed=9))

    @pytest.mark.parametrize("t_s,t_t", [(6, 24), (12, 18), (18, 18), (24, 18)])
    def test_grid_configs_run(self, mech_bundle, inst, t_s, t_t):
        cfg = P.HandoverConfig(t_s=t_s, t_t=t_t, seed=1)
        img, trace = P.run_lph(inst, cfg, mech_bundle)
        assert img.shape == (64, 64, 3)
        assert trace["phase1_steps"] == t_s and trace["phase2_steps"] == t_t
        assert len(trace["latent_norms"]) == t_s + t_t
        assert trace["adapter_applied"]

    def test_end_to_end_determinism(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=18, t_t=18, seed=77)
        a, _ = P.run_lph(inst, cfg, mech_bundle)
        b, _ = P.run_lph(inst, cfg, mech_bundle)
        assert np.array_equal(a, b)

    def test_seed_changes_output(self, mech_bundle, inst):
        a, _ = P.run_lph(inst, P.HandoverConfig(t_s=18, t_t=18, seed=1), mech_bundle)
        b, _ = P.run_lph(inst, P.HandoverConfig(t_s=18, t_t=18, seed=2), mech_bundle)
        assert not np.array_equal(a, b)

    def test_pixel_handover_arm(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=18, t_t=18, seed=5)
        img, trace = P.run_lph(inst, cfg, mech_bundle, handover_space="pixel")
        assert trace["handover"] == "pixel"
        assert img.shape == (64, 64, 3)

    def test_rgb_refine_arm(self, mech_bundle, inst):
        cfg = P.HandoverConfig(t_s=18, t_t=18, seed=5)
        img, trace = P.run_rgb_refine(inst, cfg, mech_bundle)
        assert trace["handover"] == "rgb_refine"
        outside = ~inst.garment_mask_gt.astype(bool)
        assert np.array_equal(img[outside], inst.masked_person[outside])

    def test_frozen_backbones(self, mech_bundle, inst, tmp_path):
        before = {}
        for k, m in mech_bundle.models.items():
            m.save(tmp_path / f"{k}.ckpt")
            before[k] = checkpoint_checksum(tmp_path / f"{k}.ckpt")
        P.run_lph(inst, P.HandoverConfig(t_s=18, t_t=18, seed=0), mech_bundle)
        for k, m in mech_bundle.models.items():
            m.save(tmp_path / f"{k}.ckpt")
            assert checkpoint_checksum(tmp_path / f"{k}.ckpt") == before[k]

    def test_missing_component_named(self, inst):
        schedule = build_linear_schedule()
        bundle = P.Bundle(spaces={"S": W.Autoencoder("S", 1),
                                  "T": W.Autoencoder("T", 2)},
                          models={k: B.Denoiser(k, 1) for k in B.KINDS},
                          adapter_net=None, schedule=schedule,
                          ladder=build_ladder(schedule, 30))
        for m in bundle.models.values():
            m.trained = True
        with pytest.raises(P.PipelineError, match="adapter"):
            P.run_lph(inst, P.HandoverConfig(t_s=18, t_t=18, seed=0), bundle)
