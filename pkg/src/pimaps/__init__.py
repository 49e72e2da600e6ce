"""Probabilistic index maps.

A collection of signals (images, spectrograms) shares a per-location
distribution over palette indices, while every signal carries its own
palette of Gaussian measurement models.  Structure is therefore learned
independently of colour, illumination or spectral offsets.
"""

from .bgsub import (ForegroundResult, detect, expected_background, infer_test_palette,
                    pixelwise_free_energy, robust_palette, train_background)
from .core import (EmConfig, IndexPrior, Palette, PaletteEntry, PimModel, Responsibilities,
                   SignalGrid, e_step, exact_negative_log_likelihood, fit_pim, free_energy,
                   harden_prior, log_entry_likelihood, m_step_palette, m_step_prior)
from .errors import ConfigurationError, InvalidInputError, InvalidStateError, ParseError, PimError
from .hmm import (BandPalettes, HmmFit, HmmPosterior, PimHmm, classify_utterance,
                  fit_pim_hmm, forward_backward, hmm_e_step, hmm_free_energy, infer_utterance)
from .io import (load_image, load_model, load_spectrogram_csv, save_image, save_model,
                 save_spectrogram_csv, write_trace_csv)
from .synth import PlantedDataset, synth_pim_dataset, write_dataset
from .tmpim import (TmpimFit, TmpimModel, TmpimPosterior, cluster_assignments, fit_tmpim,
                    tmpim_e_step, tmpim_free_energy)
from .transform import Transform, TransformSet, apply_transform, transform_scores

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
