"""Binary neural networks with dynamic input-conditioned activations."""
