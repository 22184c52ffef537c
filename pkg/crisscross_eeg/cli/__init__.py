"""Command-line surface: run configuration, commands and the entry point."""
