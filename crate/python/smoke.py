"""End-to-end smoke run of the vqanon Python bindings on a tiny model."""

import json
import math
import sys
import tempfile
from pathlib import Path

import vqanon

TINY = {
    "encoder": {"channels": 32, "front_blocks": 1, "post_blocks": 1, "residual_blocks": 1, "out_dim": 16},
    "codebook": {"size": 32, "dim": 16},
    "prosody": {"input_dim": 2, "hidden": 8},
    "generator": {
        "base_channels": 16,
        "resblock_kernels": [3],
        "resblock_dilations": [[1]],
        "local_cond_dim": 32,
    },
    "discriminator": {"width_divisor": 16},
    "training": {"epochs": 2, "batch_size": 2, "crop_frames": 8, "checkpoint_every_epochs": 1},
}


def main() -> int:
    assert vqanon.compute_eer([0.9, 0.8], [0.2, 0.1])[0] == 0.0
    assert vqanon.compute_eer([0.1, 0.9], [0.1, 0.9])[0] == 50.0
    assert vqanon.compute_uar([[8, 2], [4, 6]]) == 70.0
    paper = vqanon.Config()
    assert math.isclose(paper.lr_at_epoch(150), 2e-4 * 0.999**150, rel_tol=1e-12)

    cfg = vqanon.Config(overrides=json.dumps(TINY), seed=7)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        corpus = root / "corpus"
        utts = vqanon.make_corpus(corpus, per_speaker=2, seed=7)
        feats = vqanon.extract_features(corpus / "wav" / "spk_a" / "a_00.wav")
        assert feats["n_frames"] == 100 and len(feats["mel"][0]) == 80

        pick = vqanon.select_pseudo_xvector(vqanon.stub_xvector("spk_a"), "a_00", corpus / "pool.bin", seed=7)
        assert len(pick["far_speaker_ids"]) == 200 and len(pick["selected_speaker_ids"]) == 100

        n, skipped = vqanon.features(corpus / "wav", root / "feat", cfg)
        assert (n, skipped) == (len(utts), [])
        mel = vqanon.train(root / "feat", root / "run", cfg, xvectors=corpus / "xvectors")
        assert mel and all(math.isfinite(v) for v in mel)
        records = vqanon.anonymize(
            root / "feat", corpus / "xvectors", corpus / "pool.bin", root / "run", 2, root / "anon", cfg
        )
        first = json.loads(records[0])
        assert first["system"] == 2 and 0.8 <= first["alpha"] <= 1.2
        assert first["samples"] == 160 * first["frames"]

        trials = root / "s.trials"
        trials.write_text("t1 0.9 target\nt2 0.4 target\nn1 0.5 nontarget\nn2 0.1 nontarget\n")
        print(vqanon.evaluate({"sys": trials}))

        try:
            vqanon.features(root / "nowhere", root / "x", cfg)
        except vqanon.VqanonError as e:
            assert "no input audio" in str(e)
        else:
            raise AssertionError("missing input accepted")
    print(f"smoke ok: {len(records)} utterances, final mel L1 {mel[-1]:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
