class DataError(Exception):
    """Bad or inconsistent input data (manifests, annotations, images, predictions)."""


class ManifestError(DataError):
    pass
