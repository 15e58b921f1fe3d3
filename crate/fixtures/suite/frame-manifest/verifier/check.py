import json
import os

snap = "snapshot"
want = sorted(f for f in os.listdir(os.path.join(snap, "frames")) if f.endswith(".png"))
try:
    doc = json.load(open(os.path.join(snap, "report/manifest.json")))
    items = doc["frames"]
    ok = [
        isinstance(it, dict)
        and it.get("file") == "frames/" + name
        and it.get("bytes") == os.path.getsize(os.path.join(snap, "frames", name))
        for it, name in zip(items, want)
    ]
    score = sum(ok) / len(want) if len(items) == len(want) else 0.0
except (OSError, ValueError, KeyError, TypeError):
    score = 0.0
print(json.dumps({"score": score}))
