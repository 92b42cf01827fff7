"""Meta-RL driven co-design of planar quadruped morphology and control.

Pipeline: a design-conditioned locomotion policy is meta-trained so a few
gradient steps specialize it to any design in a distribution of link
scales and gear ratios; an evolution strategy then searches the design
space, scoring each candidate by the cost the adapted policy achieves.
"""

__version__ = "0.1.0"
