from godet.data.documents import (
    AnnotatedDocument,
    Annotation,
    DatasetManifest,
    DocumentImage,
    load_manifest,
    load_png,
    manifest_from_dict,
    manifest_to_dict,
    save_manifest,
    save_png,
    split,
)
from godet.data.render import LABEL_COLORS, render
from godet.data.synth import SYNTH_PRESETS, SynthConfig, synth_corpus, synth_page
from godet.data.voc import export_voc_xml, import_voc_xml

__all__ = [
    "AnnotatedDocument", "Annotation", "DatasetManifest", "DocumentImage", "LABEL_COLORS",
    "SYNTH_PRESETS", "SynthConfig", "export_voc_xml", "import_voc_xml", "load_manifest", "load_png",
    "manifest_from_dict", "manifest_to_dict", "render", "save_manifest", "save_png", "split",
    "synth_corpus", "synth_page",
]
