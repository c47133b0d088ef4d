# Command handlers for the fllab CLI
