"""Weight-space representation learning over populations of small networks.

Modules: ``zoo_store`` (checkpoint storage), ``zoogen`` (population training),
``tokenizer``, ``model`` (the encoder/decoder), ``losses``, ``trainer``,
``sampler`` (zero-shot generation), ``baselines`` (soups and re-basin),
``evalharness`` and ``cli``.
"""
__version__ = "0.1.0"
