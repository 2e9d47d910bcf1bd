class KwsError(Exception):
    pass


class FormatError(KwsError, ValueError):
    pass


class UnknownPhonemeError(KwsError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class OutOfVocabularyError(KwsError, KeyError):
    def __init__(self, words) -> None:
        self.words = list(words)
        super().__init__(f"Words missing from the lexicon: {', '.join(self.words)}")

    def __str__(self) -> str:
        return str(self.args[0])


class EmptyKeywordError(KwsError, ValueError):
    pass


class BlankTokenError(KwsError, ValueError):
    pass


class DimensionMismatchError(KwsError, ValueError):
    pass


class ConfigError(KwsError, ValueError):
    pass


class MetricError(KwsError, ValueError):
    pass
