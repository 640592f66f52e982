"""K3M: knowledge-enhanced three-modality pretraining at desk scale.

Subpackages and modules map onto the pipeline stages:

* ``data_model``  - product items, synthetic corpora, corpus files
* ``corruption``  - modality missing/noise transformations and splits
* ``nn``          - tensors, autodiff, transformer blocks, grad checking
* ``encoders``    - masking plus the modal-encoding layer
* ``interaction`` - co-attention, feature fusion, structure aggregation
* ``tasks``       - pretraining losses, task heads, metrics, datasets
* ``model``       - the composed model
* ``trainer``     - Adam, schedules, pretrain/finetune loops
* ``cli``         - the ``k3m`` command
"""

__version__ = "0.1.0"
