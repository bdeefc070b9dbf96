"""Training, verification and run orchestration."""
