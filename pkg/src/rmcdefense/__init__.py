"""Bezier-curve search for models robust to several lp threat models at once: attacks, training, evaluation and a staged search."""
