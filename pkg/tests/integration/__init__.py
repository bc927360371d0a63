"""Integration tests - slow tests that load the pretrained VGG-19 backbone.

Skipped when the ImageNet weights can neither be downloaded nor found via
GEOSTYLE_BACKBONE_WEIGHTS.
"""
