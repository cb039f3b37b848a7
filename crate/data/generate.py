"""Writes the synthetic benchmark and sensitivity fixtures.

Every topic is an invented place with three facts. Fact passages carry one
fact each; mention passages name the place without stating a fact. Filler
sentences never name a place or a fact, so a reader that keeps sentences
mentioning the place recovers exactly the stated facts.

Usage: python3 data/generate.py   (from the repository root)
"""

import json
from pathlib import Path

ROOT = Path(__file__).resolve().parent

FILLER = [
    "Visitors usually arrive on the early morning train from the capital.",
    "Local records from the first decades are patchy and often contradictory.",
    "The surrounding farmland produces barley, beans and a little wool.",
    "A small museum near the square keeps maps drawn by earlier surveyors.",
    "Weather in the region turns quickly, so walkers carry spare coats.",
    "Several families have run the same shops for four or five generations.",
    "The nearest hospital sits about an hour away by the valley road.",
    "Older residents still tell stories about the long winter of the flood year.",
    "Guidebooks recommend spending at least two days to see the main sights.",
    "Most buildings in the old quarter are made from pale local stone.",
    "A weekly market fills the main street every Saturday until noon.",
    "School groups visit in spring when the paths are dry and the days long.",
    "The regional council publishes an annual report on roads and water.",
    "Few of the original wooden houses survived the great fire.",
    "Cyclists share the narrow lanes with tractors during the harvest.",
    "Postcards sold at the station show the view from the northern ridge.",
    "A ferry once crossed the river here, though the service ended long ago.",
    "Historians disagree about when the first permanent settlers came.",
    "The local dialect borrows many words from the mountain communities.",
    "Evening concerts are held in the chapel throughout the summer months.",
    "Migrating birds stop on the marshes each autumn in great numbers.",
    "The library opens late on Thursdays for readers who work during the day.",
    "Restoration work on the bridge was finished after three long seasons.",
    "Travellers are advised to book rooms early during the festival week.",
]

MENTIONS = [
    "{topic} lies a short walk from the old coaching road.",
    "{topic} was first surveyed by a team of county engineers.",
    "{topic} appears on maps from the late eighteenth century.",
    "{topic} is managed by a small trust of volunteers.",
]

BENCH_TOPICS = [
    ("Varnholt Abbey", ["copper lanterns", "silent orchard", "midwinter bell"]),
    ("Quillmere Lake", ["floating gardens", "blue herons", "reed boats"]),
    ("Ostravik Pass", ["salt caravans", "stone shelters", "eagle nests"]),
    ("Thessaly Mill", ["paper looms", "cider press", "willow wheel"]),
    ("Brannock Fort", ["star walls", "signal fires", "iron gate"]),
    ("Corvin Isle", ["seal colonies", "lighthouse keepers", "amber beaches"]),
    ("Dellacourt Hall", ["painted ceilings", "maze garden", "glass library"]),
    ("Emberton Quarry", ["green marble", "echo chamber", "fossil ferns"]),
    ("Fallowmere Bridge", ["toll house", "nine arches", "river races"]),
    ("Grisedale Tower", ["clock face", "spiral stair", "weather vane"]),
    ("Harrowgate Market", ["spice stalls", "tin toys", "lantern night"]),
    ("Ilvermoor Forest", ["ancient yews", "charcoal burners", "red deer"]),
    ("Jorvane Harbour", ["herring fleet", "rope walk", "tidal pool"]),
    ("Kestrel Downs", ["chalk horse", "barrow mounds", "skylark song"]),
    ("Lindqvist Observatory", ["brass telescope", "comet records", "night tours"]),
    ("Marrowby Caves", ["glow worms", "underground river", "bone chapel"]),
    ("Northcliff Pier", ["penny arcade", "pier theatre", "sea swims"]),
    ("Oakhaven Priory", ["herb cloister", "bee hives", "choir school"]),
    ("Pellworth Dam", ["spillway steps", "trout ladder", "valve house"]),
    ("Ravenscar Moor", ["heather honey", "standing stones", "peat bogs"]),
]

SENSITIVITY_TOPICS = [
    ("Ashgrove Vale", ["linen mills", "plum fairs", "wren boxes"]),
    ("Belmoor Cross", ["bell foundry", "pilgrim inn", "yew avenue"]),
    ("Calder Rise", ["wind pumps", "goat cheese", "kite contests"]),
    ("Dunmore Strand", ["razor clams", "sand yachts", "dune chapel"]),
    ("Elstow Heath", ["gorse fires", "adder trails", "flint mines"]),
    ("Fenwick Lock", ["canal barges", "eel traps", "lock cottage"]),
    ("Glenarm Steps", ["moss terraces", "spring wells", "tea rooms"]),
    ("Holloway Keep", ["arrow slits", "moat lilies", "jousting field"]),
]

def filler(seed, count):
    return [FILLER[(seed * 7 + i * 5) % len(FILLER)] for i in range(count)]

def passages_for(topic, facts, index, next_pid):
    out = []
    for j, fact in enumerate(facts):
        sentences = [f"{topic} is known for its {fact}."] + filler(index * 5 + j, 8)
        out.append({"pid": next_pid(), "title": topic, "text": " ".join(sentences)})
    for j in range(2):
        mention = MENTIONS[(index + j) % len(MENTIONS)].format(topic=topic)
        sentences = filler(index * 5 + 3 + j, 4) + [mention] + filler(index * 5 + 11 + j, 4)
        out.append({"pid": next_pid(), "title": f"{topic} (history)", "text": " ".join(sentences)})
    return out

def build(topics, prefix, qprefix):
    counter = iter(range(1, 10_000))
    next_pid = lambda: f"{prefix}{next(counter):03d}"
    corpus, queries, gold = [], [], []
    for i, (topic, facts) in enumerate(topics):
        corpus.extend(passages_for(topic, facts, i, next_pid))
        qid = f"{qprefix}{i + 1:02d}"
        record = {"qid": qid, "style": "asqa", "short_answer_sets": [[f] for f in facts]}
        queries.append({"qid": qid, "question": f"What is {topic} known for?", "gold": record})
        gold.append(record)
    return corpus, queries, gold

def write(path, rows):
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))

def main():
    for topics, folder, prefix, qprefix in [
        (BENCH_TOPICS, "bench", "p", "b"),
        (SENSITIVITY_TOPICS, "sensitivity", "s", "s"),
    ]:
        corpus, queries, gold = build(topics, prefix, qprefix)
        write(ROOT / folder / "corpus.jsonl", corpus)
        write(ROOT / folder / "queries.jsonl", queries)
        write(ROOT / folder / "gold.jsonl", gold)

if __name__ == "__main__":
    main()
