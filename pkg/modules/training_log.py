"""
Log de treinamento por época.
Grava uma linha de texto por época e mantém as últimas N entradas em memória.
"""
import logging
import math
import os
from collections import deque
from typing import List, Optional

logger = logging.getLogger(__name__)


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.6e}"


class TrainingLog:
    """Entradas por época: buffer em memória + arquivo texto (opcional)"""

    def __init__(self, path: Optional[str] = None, maxlen: int = 500):
        self.path = path
        self._memory_buffer: deque = deque(maxlen=maxlen)
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            open(path, "w", encoding="utf-8").close()

    def record(self, epoch: int, lr: float, train_loss: float, val_loss: Optional[float] = None,
               val_ade4: Optional[float] = None, best: bool = False) -> dict:
        """
        Registrar uma época.

        Args:
            epoch: Índice da época (0-based)
            lr: Taxa de aprendizado usada na época
            train_loss: Perda média de treino
            val_loss: Perda média de validação (None sem conjunto de validação)
            val_ade4: ADE@4s de validação
            best: Se a época gerou o melhor checkpoint até agora
        """
        entry = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
                 "val_loss": val_loss, "val_ade4": val_ade4, "best": best}
        self._memory_buffer.append(entry)

        line = (f"epoch={epoch} lr={lr:.3e} train_loss={_fmt(train_loss)} "
                f"val_loss={_fmt(val_loss)} val_ade4={_fmt(val_ade4)}{' best' if best else ''}")
        if self.path:
            try:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")
            except OSError as e:
                logger.warning(f"Erro ao gravar log de treinamento: {e}")
        logger.info(f"[TRAIN] {line}")
        return entry

    def entries(self) -> List[dict]:
        return list(self._memory_buffer)

    def summary(self) -> dict:
        """Resumo gravado no checkpoint"""
        entries = self.entries()
        if not entries:
            return {"epochs": 0}
        best = [e for e in entries if e["best"]]
        return {
            "epochs": len(entries),
            "final_train_loss": entries[-1]["train_loss"],
            "best_epoch": best[-1]["epoch"] if best else entries[-1]["epoch"],
            "best_val_ade4": best[-1]["val_ade4"] if best else None,
        }


def read_log_lines(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]
