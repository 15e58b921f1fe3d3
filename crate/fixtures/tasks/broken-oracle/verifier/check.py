import json

want = sorted(open("snapshot/words.txt").read().split(), reverse=True)
try:
    got = open("snapshot/sorted.txt").read().split()
except OSError:
    got = []
hits = sum(1 for w in want if w in got)
print(json.dumps({"score": hits / len(want)}))
