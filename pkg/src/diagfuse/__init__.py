"""Diagnosis-guided multi-rater segmentation label fusion, desk scale.

Subpackages:
    autodiff   tape-based reverse-mode differentiation on float64 arrays
    datagen    synthetic fundus-like images, rater simulation, degradation
    models     glaucoma classifier, toy segmentation net, vCDR rule
    fusion     expertness-weighted fusion plus majority-vote/random baselines
    staple     EM consensus baseline (per-rater sensitivity/specificity)
    diagfirst  expertness-map optimization against a frozen classifier
    metrics    Dice, IoU, ROC-AUC, vCDR error, spectral energy ratio
    cli        command-line pipeline orchestration
"""

__version__ = "0.1.0"
