"""Exception hierarchy shared by every stage of the pipeline."""


class KGReviewError(Exception):
    """Base class; the CLI turns these into a JSON error payload."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class UnalignedItem(KGReviewError):
    code = "unaligned_item"


class KindViolation(KGReviewError):
    code = "kind_violation"


class SelfLoop(KGReviewError):
    code = "self_loop"


class UnknownNode(KGReviewError):
    code = "unknown_node"


class EmptyCorpus(KGReviewError):
    code = "empty_corpus"


class DegenerateVocabulary(KGReviewError):
    code = "degenerate_vocabulary"


class MissingTags(KGReviewError):
    code = "missing_tags"


class ShapeMismatch(KGReviewError):
    code = "shape_mismatch"


class EmptyInput(KGReviewError):
    code = "empty_input"


class MissingEmbedding(KGReviewError):
    code = "missing_embedding"


class UnknownLabel(KGReviewError):
    code = "unknown_label"


class UnlabeledSentence(KGReviewError):
    code = "unlabeled_sentence"


class EmptyDataset(KGReviewError):
    code = "empty_dataset"


class VocabularyMismatch(KGReviewError):
    code = "vocabulary_mismatch"


class LengthMismatch(KGReviewError):
    code = "length_mismatch"


class InputFileError(KGReviewError):
    """Missing or malformed input file; carries the offending path and line."""

    code = "input_file"

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")

    def to_dict(self):
        out = super().to_dict()
        out["path"] = self.path
        if self.line is not None:
            out["line"] = self.line
        return out
