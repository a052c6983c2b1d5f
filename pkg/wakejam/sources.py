#  Copyright (c) 2020 Robert Lieck
"""
Registry of raw audio source corpora (keyword recordings, negative speech, background noise, music) declared in
`sources.ini` sections, plus downloading and loading them.
"""
import configparser
import logging
import os
import re
import tarfile
import zipfile
from pathlib import Path
from urllib.error import URLError, HTTPError
from urllib.request import urlretrieve
from warnings import warn

import git

from .audio import read_wav
from .corpus import Utterance
from .util import __DEFAULT__, __ROOT__, __PATH__, __PARENT__, __ACCESS__, __URL__, __DOWNLOAD__, __LOADER__, \
    __SAMPLE_RATE__, SourceNotFoundError, SourceExistsError, DownloadFailedError, LoadingFailedError, getbool

logger = logging.getLogger(__name__)

# archive formats with their tarfile/zipfile open mode
ARCHIVES = {"zip": None, "tar.gz": "r:gz", "tar.bz2": "r:bz2"}


def _to_str(what, value):
    if value is not None and not isinstance(value, str):
        warn(f"{what} '{value}' is not a string and will be converted", RuntimeWarning)
        value = str(value)
    return value


def _get_config_obj():
    return configparser.ConfigParser(allow_no_value=True,
                                     interpolation=configparser.ExtendedInterpolation(),
                                     default_section=__DEFAULT__)


##########
# registry
##########

registry = _get_config_obj()


def init_registry(*args, default=None, home=None, local=None):
    """
    Read the packaged `sources.ini`, then `~/.wakejam/sources.ini` and `./sources.ini`, then explicit files.
    For each standard location: True requires the file, None reads it if present, False skips it.
    """
    for flag, file in [(default, Path(__file__).parent / 'sources.ini'),
                       (home, Path("~/.wakejam/sources.ini").expanduser()),
                       (local, Path('sources.ini'))]:
        if flag:
            load_registry(file)
        elif flag is None:
            registry.read(file)
    for file in args:
        load_registry(file)


def reset_registry(*args, **kwargs):
    clear_registry(clear_default=True)
    init_registry(*args, **kwargs)


def load_registry(file, merge_duplicates=False):
    tmp = _get_config_obj()
    with open(file) as f:
        tmp.read_file(f)
    if not merge_duplicates:
        duplicates = set(registry.sections()) & set(tmp.sections())
        if duplicates:
            raise SourceExistsError(f"Registry file '{file}' declares sources that already exist ({duplicates}). "
                                    f"Use merge_duplicates=True to merge them.")
    with open(file) as f:
        registry.read_file(f)


def add_source(source, exists_ok=False, **kwargs):
    source = _to_str("source", source)
    if source in registry:
        if not exists_ok:
            raise SourceExistsError(f"Source '{source}' already exists. Use set_source() to modify values.")
    else:
        registry[source] = {}
    set_source(source, **kwargs)


def set_source(source, **kwargs):
    source = _to_str("source", source)
    if source not in registry:
        raise SourceNotFoundError(f"Source '{source}' not found in registry")
    for key, value in kwargs.items():
        registry[source][_to_str("key", key)] = _to_str("value", value)


def delete_source(source, not_exists_ok=False):
    if source not in registry:
        if not_exists_ok:
            return
        raise SourceNotFoundError(f"Source '{source}' not found in registry")
    registry.remove_section(source)


def clear_registry(clear_default=False):
    for section in registry.sections():
        registry.remove_section(section)
    if clear_default:
        registry[__DEFAULT__] = {}


def get(source, key, raw=False):
    """
    Value of `key` for `source`. Unless `raw`, `root` resolves to the parent's path for sub-sources and `path`
    resolves relative to `root` (defaulting to the source name).
    """
    source = _to_str("source", source)
    if source not in registry:
        raise SourceNotFoundError(f"Source '{source}' not found in registry")
    if not raw:
        if key == __ROOT__:
            parent = get(source, __PARENT__)
            if parent is not None:
                return get(parent, __PATH__)
            root = Path(registry[source][__ROOT__]).expanduser()
            if not root.is_absolute():
                warn(f"Root for source '{source}' is a relative path ('{root}'), which is interpreted relative to "
                     f"the current working directory ('{Path.cwd()}')", RuntimeWarning)
            return root
        elif key == __PATH__:
            path = registry[source][__PATH__]
            path = Path(source if path is None else path).expanduser()
            return path if path.is_absolute() else get(source, __ROOT__) / path
    return registry[source].get(_to_str("key", key))


def sources():
    yield from registry.sections()


def source_params(source, raw=False):
    if source not in registry:
        raise SourceNotFoundError(f"Source '{source}' not found in registry")
    for key in registry[source]:
        yield key, get(source, key, raw=raw)


def summary(source=None, raw=False):
    if source is None:
        return "\n\n".join(summary(s, raw=raw) for s in [__DEFAULT__] + list(sources()))
    s = f"[{source}]"
    for key, val in (registry[__DEFAULT__].items() if source == __DEFAULT__ else source_params(source, raw=raw)):
        s += f"\n    {key}: {val}"
    return s


#########
# corpora
#########

class AudioCorpus:
    """WAV files below a directory, filtered by regular expressions on file names and paths."""

    @classmethod
    def init(cls, **kwargs):
        if __PATH__ not in kwargs:
            raise TypeError(f"Missing required keyword argument '{__PATH__}'")
        return cls(**kwargs)

    def __init__(self, path, file_regex=r".*\.wav$", path_regex=None, file_exclude_regex=None,
                 path_exclude_regex=None, sample_rate=__SAMPLE_RATE__, **kwargs):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"Source directory {self.path} does not exist")
        elif not self.path.is_dir():
            raise NotADirectoryError(f"{self.path} is not a directory")
        self.sample_rate = int(sample_rate)
        self.kwargs = kwargs
        self.file_regex, self.path_regex, self.file_exclude_regex, self.path_exclude_regex = [
            None if regex is None else re.compile(regex)
            for regex in (file_regex, path_regex, file_exclude_regex, path_exclude_regex)]

    def __repr__(self):
        return f"{self.__class__.__name__}({self.path})"

    def files(self):
        """Matching files in sorted order (stable raw IDs across runs)."""
        for root, dirs, files in os.walk(self.path):
            dirs.sort()
            root = Path(root)
            for file in sorted(files):
                path = root / file
                if self.file_regex is not None and not self.file_regex.match(file):
                    continue
                if self.path_regex is not None and not self.path_regex.match(str(path)):
                    continue
                if self.file_exclude_regex is not None and self.file_exclude_regex.match(file):
                    continue
                if self.path_exclude_regex is not None and self.path_exclude_regex.match(str(path)):
                    continue
                yield path

    def data(self):
        for path in self.files():
            yield read_wav(path, self.sample_rate)

    def utterances(self, prefix=""):
        """Utterances with raw ID `prefix` + path relative to the corpus directory (without suffix)."""
        return [Utterance(prefix + path.relative_to(self.path).with_suffix("").as_posix(),
                          read_wav(path, self.sample_rate))
                for path in self.files()]


loaders = {
    "AudioCorpus": AudioCorpus.init
}


#########
# loading
#########

def populate_kwargs(source, kwargs):
    if source is not None:
        for key, val in source_params(source):
            if key not in kwargs:
                kwargs[key] = val
    return kwargs


def load(source=None, **kwargs):
    """
    Load a source corpus.
    :param source: name of a registered source, or None to use only the keyword arguments
    :param kwargs: override the registry values
    :return: output of the loader (an AudioCorpus by default)
    """
    overrides = dict(kwargs)
    kwargs = populate_kwargs(source, kwargs)
    if __PATH__ not in kwargs:
        raise LoadingFailedError(f"No {__PATH__} given for source '{source}'")
    path = Path(kwargs[__PATH__])
    if path.exists():
        loader = kwargs.get(__LOADER__)
        if loader is None:
            raise LoadingFailedError("No loader specified.")
        if isinstance(loader, str):
            try:
                loader = loaders[loader]
            except KeyError:
                raise LoadingFailedError(f"Unknown {__LOADER__} '{loader}'.")
        if not callable(loader):
            raise LoadingFailedError(f"{__LOADER__} '{loader}' is not callable.")
        return loader(**kwargs)
    if getbool(kwargs.get(__DOWNLOAD__) or False):
        kwargs[__DOWNLOAD__] = False
        download(source, **overrides)
        return load(source, **kwargs)
    raise SourceNotFoundError(f"Source '{source}' at path '{path}' does not exist "
                              f"(specify {__DOWNLOAD__}=True to try downloading).")


def create_download_path(source, kwargs):
    path = Path(kwargs[__PATH__])
    if path.exists():
        if path.is_file() or list(path.iterdir()):
            raise DownloadFailedError(f"Cannot download source '{source}': target path {path} exists and is "
                                      f"non-empty.")
    else:
        path.mkdir(parents=True)
    return path


def download(source, **kwargs):
    if source is not None and get(source, __PARENT__) is not None:
        # sub-sources are downloaded with their parent; location keys belong to the sub-source
        parent_kwargs = {k: v for k, v in kwargs.items() if k not in (__PATH__, __PARENT__)}
        return download(get(source, __PARENT__), **parent_kwargs)
    kwargs = populate_kwargs(source, kwargs)
    access = kwargs.get(__ACCESS__)
    if callable(access):
        create_download_path(source, kwargs)
        return access(source, **kwargs)
    if access == "git":
        path = create_download_path(source, kwargs)
        logger.info(f"cloning {kwargs[__URL__]} into {path}")
        try:
            git.Repo.clone_from(url=kwargs[__URL__], to_path=path)
        except git.GitCommandError as e:
            raise DownloadFailedError(f"Cloning '{kwargs[__URL__]}' failed: {e}")
    elif access in ARCHIVES:
        url = kwargs[__URL__]
        logger.info(f"downloading {url}")
        try:
            tmp_file_name, _ = urlretrieve(url=url)
        except (HTTPError, URLError) as e:
            raise DownloadFailedError(f"Opening url '{url}' failed: {e}")
        extract(tmp_file_name, access, create_download_path(source, kwargs))
    else:
        raise DownloadFailedError(f"Unknown access method '{access}'")


def extract(archive, access, path):
    """Unpack a downloaded archive of type `access` into `path`."""
    try:
        if access == "zip":
            with zipfile.ZipFile(archive) as f:
                f.extractall(path)
        else:
            with tarfile.open(archive, ARCHIVES[access]) as f:
                f.extractall(path)
    except (tarfile.TarError, zipfile.BadZipFile) as e:
        raise DownloadFailedError(f"Unpacking '{archive}' as {access} failed: {e}")


init_registry()
