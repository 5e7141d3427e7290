"""CLI, configuration and experiment presets."""
