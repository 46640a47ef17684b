"""Blind recovery of corrupted images on a frozen GAN prior.

A small trainable surrogate network learns to mimic the unknown corruption
while projected gradient descent searches the generator's latent space, so
both the corruption and the clean signals are estimated jointly from
observations alone.  The same loop doubles as an unsupervised cleanup step
in front of a classifier under distribution shift or adversarial attack.
"""

__version__ = "0.1.0"
