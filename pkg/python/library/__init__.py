# Shared building blocks: config, errors, domain types and file formats
