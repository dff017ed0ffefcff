"""
Multimodal normative modeling with an introspective VAE
"""
