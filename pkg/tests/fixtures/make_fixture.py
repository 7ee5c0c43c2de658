"""Regenerate the CLI eval fixture: python3 tests/fixtures/make_fixture.py

Writes a small mixture dataset, a model trained on it, and the eval CSV the
CLI produced for that model. The CSV was checked by hand: accuracies lie in
[0, 1], full-dense accuracy is identical across rows, recon_mse falls as k
grows and every row carries the requested active dimension.
"""

from pathlib import Path

from csr_embed import io as fio
from csr_embed.cli import main
from csr_embed.config import TrainConfig
from csr_embed.model import save_model
from csr_embed.synthetic import GaussianMixture
from csr_embed.trainer import train

HERE = Path(__file__).parent
CFG = TrainConfig(k=4, h=48, epochs=3, batch_size=16, lr=1e-3)


def main_():
    X, y = GaussianMixture.make(d=16, n_classes=4, seed=7).sample(400, seed=0)
    fio.save_dense(X, HERE / "data.bin")
    fio.save_labels(y, HERE / "labels.bin")
    model, _ = train(X, y, CFG)
    save_model(model, HERE / "model.bin")
    code = main(
        [
            "eval",
            "--model", str(HERE / "model.bin"),
            "--data", str(HERE / "data.bin"),
            "--labels", str(HERE / "labels.bin"),
            "--k", "2,4,8",
            "--seed", "0",
            "--threads", "1",
            "--out", str(HERE / "eval_reference.csv"),
        ]
    )
    assert code == 0


if __name__ == "__main__":
    main_()
