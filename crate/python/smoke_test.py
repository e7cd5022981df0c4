"""Quick end-to-end check of the Python bindings.

Build the extension first (see README), then run with the directory that
holds swav.so on PYTHONPATH.
"""

import math
import os
import tempfile

import swav


def main():
    cfg = swav.ModelConfig(
        conv_layers=[(16, 16, 2), (32, 8, 2)],
        d_model=32,
        n_layers=2,
        n_heads=2,
        ffn_dim=64,
        max_frames=128,
    )
    data = swav.generate_dataset(60, seed=7)
    train, val = data[:48], data[48:]
    wave, tokens = train[0]
    assert len(wave) > 0 and all(t > 0 for t in tokens)

    teacher = swav.AcousticModel(cfg, seed=1)
    assert teacher.count_params() == cfg.param_count()
    teacher, losses = swav.train_teacher(teacher, train, epochs=3)
    assert len(losses) == 3 and all(math.isfinite(x) for x in losses)

    logits = teacher.logits(wave)
    assert len(logits[0]) == cfg.n_tokens
    teacher.decode(wave)

    student = teacher.student(1, "alternating")
    assert student.config.n_layers == 1
    student, history = swav.distill(teacher, student, train, val, epochs=2, seed=3)
    assert [h["epoch"] for h in history] == [0, 1]

    wer = swav.evaluate_wer(teacher, val)
    q = teacher.quantize()
    assert q.size_bytes() < teacher.size_bytes()
    before = q.logits(wave)
    q.prepack()
    assert q.is_prepacked and q.logits(wave) == before
    swav.evaluate_wer(q, val)

    pruned, sparsity = teacher.prune(0.5)
    assert 0.0 < sparsity < 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.swav")
        teacher.save(path)
        assert swav.AcousticModel.load(path).logits(wave) == logits
        qpath = os.path.join(d, "m.swq8")
        q.save(qpath)
        assert swav.QuantizedModel.load(qpath).logits(wave) == before

    p = [[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]
    assert swav.kl_distill_loss(p, p) < 1e-9
    assert swav.kl_distill_loss(p, [[1 / 3] * 3] * 2) > 0
    assert sum(swav.edit_distance([1, 2, 3], [1, 3, 4])) == 2
    assert swav.word_error([[2, 1, 3]], [[2, 1, 3]]) == 0.0
    assert swav.best_path_decode([[0, 5, 0], [0, 5, 0], [9, 0, 0], [0, 5, 0]]) == [1, 1]
    codes, scale = swav.quantize_weights([0.5, -1.0, 0.25])
    assert codes[1] == -127 and abs(scale - 1.0 / 127) < 1e-8
    kept, threshold = swav.prune_layer([0.1, -2.0, 0.05, 1.5], 0.5)
    assert kept[1] == -2.0 and threshold > 0

    print(f"ok: teacher WER {wer:.3f}, pruned sparsity {sparsity:.3f}")


if __name__ == "__main__":
    main()
