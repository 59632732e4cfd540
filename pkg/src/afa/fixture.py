"""Deterministic synthetic dataset in the PAT record format.

Template-generated, clearly synthetic data used for tests and desk-scale
evaluation runs. It is not the PAT dataset. Each persona has a
narrative description and a few scenarios of follow-up questions.
Some questions reveal persona facts through first-person cues
("I work as a ...", "I love ...", "My goal is ..."), and the ground-truth
answers refer back to the persona the way a persona-conditioned assistant
would.
"""

from __future__ import annotations

import json
from pathlib import Path

SCENARIOS = (
    "Project Planning",
    "Language Learning",
    "Job Interview Preparation",
    "Story Development",
    "Hobby Assistance",
    "Personal Development",
    "Emotional Support",
    "Travel Planning",
    "Shopping Assistance",
    "Content Creation",
    "Relationship Advice",
    "Family Assistance",
)

_NAMES = (
    "Amara Bjorn Chiara Dmitri Elif Farid Greta Hiro Ines Jonas Kavya Lucien Maren Nikolai Odette "
    "Pablo Quinn Rosalind Soren Tamsin Umar Valeria Wendell Ximena Yusuf Zora Anselm Bettina Cormac "
    "Delphine Emeka Fiona Gideon Helka Ivo Juno"
).split()

_COUNTRIES = (
    "Portugal Kenya Norway Chile Vietnam Morocco Ireland Peru Finland Ghana Croatia Nepal Uruguay "
    "Iceland Jordan Mongolia Ecuador Latvia Senegal Bhutan Slovenia Tunisia Paraguay Estonia Malawi "
    "Cyprus Namibia Laos Albania Bolivia Armenia Fiji Georgia Rwanda Malta Samoa"
).split()

_OCCUPATIONS = (
    "marine biologist", "pastry chef", "tax accountant", "wildlife photographer", "firefighter",
    "orthodontist", "bus mechanic", "museum curator", "glassblower", "air traffic controller",
    "sommelier", "beekeeper", "cartographer", "locksmith", "midwife", "patent lawyer",
    "stonemason", "radio producer", "veterinarian", "violin maker", "geologist", "florist",
    "ferry captain", "tailor", "seismologist", "puppeteer", "brewmaster", "librarian",
    "blacksmith", "acupuncturist", "zookeeper", "astronomer", "welder", "translator",
    "perfumer", "surveyor",
)

_HOBBIES = (
    "jazz saxophone", "rock climbing", "origami", "birdwatching", "salsa dancing", "chess problems",
    "pottery", "kite surfing", "stargazing", "calligraphy", "trail running", "sourdough baking",
    "model trains", "crossword puzzles", "mountain biking", "embroidery", "scuba diving",
    "vinyl collecting", "bonsai gardening", "fencing", "karaoke", "woodcarving", "sailing",
    "knitting", "archery", "beatboxing", "geocaching", "quilting", "skateboarding",
    "falconry", "juggling", "ice skating", "kayaking", "mosaics", "rowing", "taxidermy",
)

_DISLIKES = (
    "crowded malls", "loud traffic", "spicy curries", "early alarms", "cold showers",
    "long queues", "reality television", "humid summers", "small talk", "muddy boots",
    "flickering lights", "pop ballads", "messy kitchens", "slow elevators", "airport delays",
    "sticky floors", "soggy cereal", "group chats", "windy beaches", "tangled cables",
    "late buses", "bitter coffee", "rainy picnics", "noisy neighbours", "crumpled paper",
    "dusty attics", "lukewarm tea", "broken umbrellas", "squeaky doors", "rushed meetings",
    "pushy salespeople", "traffic jams", "overcooked pasta", "shrill whistles", "damp socks",
    "wasted food",
)

_GOALS = (
    "open a community garden", "run a marathon abroad", "write a cookbook", "restore an old sailboat",
    "learn classical guitar", "build a tiny house", "start a podcast", "adopt a rescue greyhound",
    "publish a poetry collection", "cycle across patagonia", "mentor young engineers",
    "launch a bakery", "hike the appalachian trail", "found a chess club", "teach pottery classes",
    "design a board game", "photograph every lighthouse", "brew award winning cider",
    "volunteer at a wildlife sanctuary", "compose a film score", "renovate a farmhouse",
    "organise a street festival", "translate a novel", "breed rare orchids", "climb kilimanjaro",
    "paint a city mural", "open a bookshop", "learn to fly gliders", "record a folk album",
    "coach a youth football team", "build a telescope", "sail to madeira", "plant an orchard",
    "sew a wedding dress", "map hidden springs", "carve a canoe",
)

_DECISION = (
    "Makes decisions carefully after comparing options in a spreadsheet.",
    "Trusts gut feeling and decides quickly.",
    "Prefers to talk choices through with close friends before deciding.",
    "Relies on expert reviews and detailed research before committing.",
)

_TRIGGERS = (
    "Feels anxious about unexpected deadlines.",
    "Gets frustrated when plans change at the last minute.",
    "Feels uneasy in unfamiliar social settings.",
    "Becomes stressed when finances feel uncertain.",
)

# scenario -> (task noun phrase, list of aspects)
_TASKS = {
    "Project Planning": ("project plan", ["scope", "milestones", "budget", "risks", "team roles", "timeline"]),
    "Language Learning": ("language study routine", ["vocabulary", "grammar", "listening practice", "speaking partners", "reading habits", "pronunciation"]),
    "Job Interview Preparation": ("interview preparation", ["common questions", "salary talk", "portfolio", "body language", "follow-up emails", "research on the company"]),
    "Story Development": ("short story", ["main character", "plot twist", "setting", "dialogue", "pacing", "ending"]),
    "Hobby Assistance": ("new hobby routine", ["equipment", "practice schedule", "beginner mistakes", "local clubs", "progress tracking", "costs"]),
    "Personal Development": ("self improvement plan", ["morning habits", "focus", "reading list", "reflection journal", "sleep", "accountability"]),
    "Emotional Support": ("plan for a stressful week", ["worries", "breathing exercises", "boundaries", "support network", "rest", "small wins"]),
    "Travel Planning": ("trip itinerary", ["flights", "accommodation", "local food", "day trips", "packing list", "travel insurance"]),
    "Shopping Assistance": ("shopping list for a new flat", ["furniture", "kitchenware", "lighting", "storage", "second hand options", "delivery"]),
    "Content Creation": ("content calendar", ["post ideas", "video editing", "audience growth", "thumbnails", "posting schedule", "collaborations"]),
    "Relationship Advice": ("conversation with my partner", ["listening", "shared chores", "date nights", "disagreements", "family visits", "quality time"]),
    "Family Assistance": ("family weekend plan", ["meals", "activities for kids", "grandparents visit", "chores", "screen time", "budget"]),
}

CUE_TURNS = {5: "occupation", 8: "likes", 11: "goal"}


def make_persona(i: int) -> dict:
    n = len(_NAMES)
    if i >= n:
        raise ValueError(f"the fixture supports at most {n} personas")
    occupation = _OCCUPATIONS[i]
    hobby = _HOBBIES[i]
    country = _COUNTRIES[i]
    text = (
        f"Works as a {occupation} in {country}. "
        f"Loves {hobby} and dislikes {_DISLIKES[i]}. "
        f"Driven by the goal to {_GOALS[i]}. "
        f"{_DECISION[i % len(_DECISION)]} "
        f"{_TRIGGERS[(i // 2) % len(_TRIGGERS)]} "
        f"Is {24 + (i * 7) % 45} years old."
    )
    return {
        "persona_id": f"persona-{i:02d}",
        "name": _NAMES[i],
        "occupation": occupation,
        "hobby": hobby,
        "goal": _GOALS[i],
        "country": country,
        "text": text,
    }


def _query(p: dict, scenario: str, t: int) -> str:
    task, aspects = _TASKS[scenario]
    aspect = aspects[t % len(aspects)]
    name = p["name"]
    cue = CUE_TURNS.get(t)
    if t == 0:
        return f"Hi, this is {name}. I want help with my {task}; where should I start with the {aspect}?"
    if cue == "occupation":
        return f"{name} again. I work as a {p['occupation']}, so how should I fit the {aspect} of my {task} around that?"
    if cue == "likes":
        return f"{name} here. I love {p['hobby']}; could the {aspect} part of my {task} make room for it?"
    if cue == "goal":
        return f"{name} here. My goal is to {p['goal']}. How does the {aspect} of my {task} help with that?"
    return f"{name} following up (step {t}): what should I do next about the {aspect} for my {task}?"


def _response(p: dict, scenario: str, t: int) -> str:
    task, aspects = _TASKS[scenario]
    aspect = aspects[t % len(aspects)]
    cue = CUE_TURNS.get(t)
    if cue == "occupation":
        extra = f"Your shifts as a {p['occupation']} mean short focused sessions will work better than long ones."
    elif cue == "likes":
        extra = f"Building in time for {p['hobby']} will keep your energy up while you work through it."
    elif cue == "goal":
        extra = f"Each small step here moves you closer to being able to {p['goal']}."
    else:
        extra = f"Since you enjoy {p['hobby']}, treat it as a reward after each session to stay motivated."
    return (
        f"For the {aspect} of your {task}, pick one concrete action for this week, write it down, "
        f"and check how it went before adding anything new. {extra} "
        f"Keep the plan simple and adjust it as you learn what works."
    )


def generate_records(
    n_personas: int = 32,
    scenarios_per_persona: int = 2,
    turns_per_scenario: int = 12,
) -> list[dict]:
    """PAT-format records: persona, scenario, history, prompt, completion, persona_id."""
    records = []
    for i in range(n_personas):
        p = make_persona(i)
        for s in range(scenarios_per_persona):
            scenario = SCENARIOS[(i + 5 * s) % len(SCENARIOS)]
            history: list[list[str]] = []
            for t in range(turns_per_scenario):
                q, r = _query(p, scenario, t), _response(p, scenario, t)
                records.append(
                    {
                        "persona_id": p["persona_id"],
                        "persona": p["text"],
                        "scenario": scenario,
                        "history": [list(h) for h in history],
                        "prompt": q,
                        "completion": r,
                    }
                )
                history.append([q, r])
    return records


def write_fixture(path: str | Path, **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in generate_records(**kwargs):
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path
