"""
Differentiable compute core and the SNet / discriminator networks.
"""
