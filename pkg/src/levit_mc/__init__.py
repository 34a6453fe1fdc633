"""Malware classification from executable images with a DenseNet/LeViT cascade."""
