"""Forward-backward representation learning on small controlled Markov processes."""
