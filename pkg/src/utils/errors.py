"""
Exceptions du banc d'essai.
Les commandes traduisent ces erreurs en codes de sortie.
"""

from typing import Any, Optional


class DemixError(Exception):
    """Erreur de base du projet."""


class ConfigError(DemixError, ValueError):
    """Configuration invalide ou incompatible (code de sortie 1)."""


class SamplingError(DemixError, RuntimeError):
    """Echantillonnage impossible dans le budget de rejet."""


class DivergenceError(DemixError, RuntimeError):
    """
    Gradient ou perte non finie pendant l'entrainement.

    Args:
        message: Description de l'erreur
        iteration: Iteration fautive
        history: Historique partiel (TrainHistory) au moment de l'arret
    """

    def __init__(self, message: str, iteration: int, history: Optional[Any] = None):
        super().__init__(message)
        self.iteration = iteration
        self.history = history
