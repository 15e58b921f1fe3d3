import json
import re

DURATION = 8.0


def seconds(ts):
    h, m, rest = ts.split(":")
    s, ms = rest.split(",")
    return int(h) * 3600 + int(m) * 60 + int(s) + int(ms) / 1000


score = 0.0
try:
    text = open("snapshot/captions.srt").read()
    m = re.search(r"(\d\d:\d\d:\d\d,\d\d\d) --> (\d\d:\d\d:\d\d,\d\d\d)", text)
    if m and "Lecture" in text:
        start, end = seconds(m.group(1)), seconds(m.group(2))
        err = abs(start) + abs(end - DURATION)
        score = max(0.0, 1.0 - err / DURATION)
except OSError:
    pass
print(json.dumps({"score": round(score, 6)}))
