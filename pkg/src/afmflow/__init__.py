"""Autoregressive flow matching for probabilistic forecasting of stochastic dynamics."""

from .afm import AfmConfig, ForecastEnsemble, forecast, quantiles, train
from .bundle import ModelBundle, load_bundle, save_bundle
from .dynsys import ForecastDataset, generate_dataset, get_system, load_dataset, save_dataset
from .fmbase import FmConfig, fm_forecast, fm_train
from .metrics import crps_empirical, mean_crps, nrmse

__version__ = "0.1.0"

__all__ = [
    "AfmConfig", "FmConfig", "ForecastDataset", "ForecastEnsemble", "ModelBundle",
    "crps_empirical", "fm_forecast", "fm_train", "forecast", "generate_dataset", "get_system",
    "load_bundle", "load_dataset", "mean_crps", "nrmse", "quantiles", "save_bundle",
    "save_dataset", "train",
]
