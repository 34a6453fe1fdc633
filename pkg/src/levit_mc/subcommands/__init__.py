"""Top level package for levit-mc subcommands."""
