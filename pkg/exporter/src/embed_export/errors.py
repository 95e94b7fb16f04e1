"""Error taxonomy, mirroring the consumer's exit-code convention."""


class SpecError(Exception):
    """Bad export request: template, encoder id, batch size. Exit 2."""


class DatasetError(Exception):
    """Unusable dataset on disk: missing root, empty class, no classes. Exit 3."""
