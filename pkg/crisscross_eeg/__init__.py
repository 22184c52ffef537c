"""crisscross-eeg: a desk-scale criss-cross transformer for EEG.

The package pre-trains a patch-grid transformer on multichannel EEG by
masked-patch reconstruction, then fine-tunes it on labelled tasks.

Packages:
    - crisscross_eeg.core: containers, preprocessing, model, training, metrics
    - crisscross_eeg.verify: gradient checks and brute-force oracles
    - crisscross_eeg.cli: the ``crisscross-eeg`` command and its config file

Quick Start:
    >>> from crisscross_eeg.core.synthetic import SyntheticSpec, generate_synthetic
    >>> from crisscross_eeg.core.model import ModelConfig
    >>> from crisscross_eeg.core.patching import MaskSpec
    >>> from crisscross_eeg.core.training import ScheduleConfig, TrainConfig, pretrain
    >>>
    >>> samples = generate_synthetic(SyntheticSpec(samples_per_class=50))
    >>> result = pretrain(
    ...     samples,
    ...     ModelConfig.desk(),
    ...     MaskSpec(ratio=0.5),
    ...     ScheduleConfig(epochs=1),
    ...     train=TrainConfig(max_steps=20),
    ... )
    >>> result.log.losses[-1]
"""

__version__ = "0.1.0"
