"""Design, verification and run-time control of RNN plant models."""
