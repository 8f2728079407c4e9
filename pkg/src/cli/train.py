"""
Pretraining loop: epochs over shuffled minibatches, validation, early stopping and checkpoints
"""
import logging
import os

import numpy as np
import pandas as pd

from src.data.sequences import augment_batch
from src.diffusion.sampler import GaussianDiffusion
from src.errors import NumericalError
from src.tensor.optim import Adam
from src.tensor.tensor import backward, no_grad

logger = logging.getLogger(__name__)

BEST = "best.rgdf"
LAST = "last.rgdf"
VAL_STREAM = 2 ** 31 - 2


class Trainer:
    """
    Denoiser pretraining with Adam, reverse-complement augmentation and
    patience-based early stopping on the validation loss.

    params DenoiserParams: trained in place
    diffusion GaussianDiffusion: loss definition
    train tuple[np.ndarray, np.ndarray]: one-hot batch (N,4,L) and cell ids
    val tuple[np.ndarray, np.ndarray]: held-out batch and cell ids
    seed int: epoch e draws from a generator keyed on (seed, e)
    """

    def __init__(self, params, diffusion: GaussianDiffusion, train, val, batch_size: int = 64, lr: float = 2e-4,
                 patience: int = 10, grad_clip: float = 1.0, rc_augment: float = 0.5, seed: int = 0):
        self.params = params
        self.diffusion = diffusion
        self.train_x, self.train_cells = train
        self.val_x, self.val_cells = val
        self.batch_size = batch_size
        self.patience = patience
        self.rc_augment = rc_augment
        self.seed = seed
        self.optimizer = Adam(dict(params.items()), lr=lr, grad_clip=grad_clip)
        self.history = []
        self.epoch = 0
        self.best_val_loss = np.inf
        self.bad_epochs = 0

    def train_epoch(self, epoch: int) -> float:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.train_x))
        losses = []
        for start in range(0, len(order), self.batch_size):
            index = order[start:start + self.batch_size]
            batch = augment_batch(self.train_x[index], rng, self.rc_augment)
            self.optimizer.zero_grad()
            loss = self.diffusion.ddpm_loss(self.params, batch, self.train_cells[index], rng, train_mode=True)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}: {value}")
            backward(loss)
            self.optimizer.step()
            losses.append(value * len(index))
        return float(np.sum(losses) / len(order))

    def validation_loss(self) -> float:
        """Same draws every epoch, so successive values are comparable."""
        rng = np.random.default_rng([self.seed, VAL_STREAM])
        total = 0.0
        for start in range(0, len(self.val_x), self.batch_size):
            batch = self.val_x[start:start + self.batch_size]
            cells = self.val_cells[start:start + self.batch_size]
            with no_grad():
                total += self.diffusion.ddpm_loss(self.params, batch, cells, rng, train_mode=False).item() * len(batch)
        return total / max(len(self.val_x), 1)

    def save(self, path: str, sidecar: dict = None):
        meta = dict(sidecar or {})
        meta.update({"epoch": self.epoch, "best_val_loss": float(self.best_val_loss), "bad_epochs": self.bad_epochs,
                     "adam_step": self.optimizer.step_count, "seed": self.seed, "history": self.history})
        self.params.save(path, sidecar=meta, extra_arrays=self.optimizer.state_arrays())

    def restore(self, meta: dict, arrays: dict):
        """Continue after the epoch recorded in a checkpoint written by `save`."""
        self.epoch = int(meta["epoch"])
        self.best_val_loss = float(meta["best_val_loss"])
        self.bad_epochs = int(meta["bad_epochs"])
        self.history = list(meta.get("history", []))
        self.optimizer.load_state_arrays(arrays, int(meta["adam_step"]))
        logger.info("Resuming after epoch %d (best validation loss %.5f)", self.epoch, self.best_val_loss)

    def fit(self, epochs: int, out_dir: str, sidecar: dict = None) -> pd.DataFrame:
        """
        Train until `epochs` or until `patience` epochs pass without a new
        best validation loss. Writes best.rgdf on every improvement and
        last.rgdf after every epoch.

        Returns:
            per-epoch history (epoch, train_loss, val_loss)
        """
        for epoch in range(self.epoch + 1, epochs + 1):
            try:
                train_loss = self.train_epoch(epoch)
            except NumericalError:
                logger.warning("Training aborted at epoch %d, %s keeps the last good weights", epoch, BEST)
                raise
            val_loss = self.validation_loss()
            self.epoch = epoch
            self.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
            logger.info("Epoch %d/%d - train loss: %.5f - val loss: %.5f", epoch, epochs, train_loss, val_loss)
            if val_loss < self.best_val_loss:
                self.best_val_loss = val_loss
                self.bad_epochs = 0
                self.save(os.path.join(out_dir, BEST), sidecar)
            else:
                self.bad_epochs += 1
            self.save(os.path.join(out_dir, LAST), sidecar)
            if self.bad_epochs >= self.patience:
                logger.warning("Early stop at epoch %d: no improvement for %d epochs", epoch, self.patience)
                break
        logger.info("Best validation loss: %.5f", self.best_val_loss)
        return pd.DataFrame(self.history, columns=["epoch", "train_loss", "val_loss"])
