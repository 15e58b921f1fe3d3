import json

want = open("verifier/expected.txt").read().splitlines()
try:
    got = open("snapshot/out/transcript_upper.txt").read().splitlines()
except OSError:
    got = []
hits = sum(1 for a, b in zip(want, got) if a == b)
print(json.dumps({"score": hits / len(want)}))
