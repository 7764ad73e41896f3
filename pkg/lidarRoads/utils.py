import json
import hashlib
import properties


def load_properties(filename):
    """
    Open a json file and load the properties into the target class

    As long as there are no namespace conflicts, the target __class__
    will be stored on the properties.HasProperties registry and may be
    fetched from there.

    :param str filename: name of file to read in
    """
    with open(filename, 'r') as outfile:
        jsondict = json.load(outfile)
        data = properties.HasProperties.deserialize(jsondict, trusted=True)
    return data


def report(message, verbose=True):
    """
    Print a progress message

    :param str message: message to print
    :param bool verbose: print only if True
    """
    if verbose:
        print(message)


def file_digest(filename):
    """
    sha256 hex digest of a file, used to compare generated artifacts
    """
    h = hashlib.sha256()
    with open(filename, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()
