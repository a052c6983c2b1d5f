#  Copyright (c) 2020 Robert Lieck

################
# some constants
################

# working sample rate of every signal in the pipeline
__SAMPLE_RATE__ = 16000

# dB value replacing log(0)
__DB_FLOOR__ = -200.0

# note bounds: the 88 keys of a piano (A0 to C8) and the digital volume range
__MIN_FREQ__ = 27.5
__MAX_FREQ__ = 4186.0
__MIN_VOL__ = 0.0
__MAX_VOL__ = 100.0

# speed of sound in m/s
__SPEED_OF_SOUND__ = 343.0

# sections of a source corpus description (see sources.ini)
__DEFAULT__ = "DEFAULT"
__INFO__ = "info"
__ROOT__ = "root"
__PATH__ = "path"
__PARENT__ = "parent"
__ACCESS__ = "access"
__URL__ = "url"
__DOWNLOAD__ = "download"
__LOADER__ = "loader"

# environment variable overriding [paths] report_dir
__REPORT_DIR_ENV__ = "WAKEJAM_REPORT_DIR"


###################
# custom exceptions
###################

class WakejamError(Exception):
    """Base class; `exit_code` is what the command line returns when the error ends a run."""
    exit_code = 1


# usage and configuration (exit code 2)

class ConfigError(WakejamError):
    exit_code = 2


class UsageError(WakejamError):
    exit_code = 2


# data (exit code 3)

class DataError(WakejamError):
    exit_code = 3


class AudioIOError(OSError, DataError):
    exit_code = 3


class AudioFormatError(DataError):
    pass


class UnsupportedAudioError(DataError):
    pass


class PlacementError(DataError):
    pass


class DegenerateOutputError(DataError):
    pass


class CompatibilityError(DataError):
    pass


class SourceNotFoundError(KeyError, DataError):
    exit_code = 3


class SourceExistsError(DataError):
    pass


class DownloadFailedError(DataError):
    pass


class LoadingFailedError(DataError):
    pass


# numerics and contracts (exit code 4)

class NumericError(WakejamError):
    exit_code = 4


class ContractError(NumericError):
    pass


class InvariantError(NumericError):
    pass


class BoundsError(NumericError):
    pass


class GeometryError(NumericError):
    pass


class NoteTooShortError(NumericError):
    pass


class EmptyOutputError(NumericError):
    pass


##################
# helper functions
##################

def getbool(value):
    """Parse a configuration flag; raises ConfigError for anything but the usual true/false spellings."""
    str_value = str(value).lower()
    if str_value in ['1', 'yes', 'true', 'on']:
        return True
    elif str_value in ['0', 'no', 'false', 'off']:
        return False
    else:
        raise ConfigError(f"Could not convert value '{value}' to bool.")
