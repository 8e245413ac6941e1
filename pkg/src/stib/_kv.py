"""key=value sidecar text files."""

FORMAT_KEY = "format"


def dump_kv(pairs):
    lines = []
    for key, value in pairs.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"cannot encode {key!r}={text!r} as key=value text")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def write_kv(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_kv(pairs))


def read_kv(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: line {line!r} is not key=value")
            out[key] = value
    return out
