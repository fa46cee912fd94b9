"""Regenerate the bundled sample corpus (src/moegap/corpus/tinytales.txt).

The stories come from a small seeded grammar, so the file is reproducible
byte for byte and carries no third-party text.

    python tools/make_corpus.py            # ~1 MB, seed 2024
"""
from __future__ import annotations

import argparse
import random
from pathlib import Path

NAMES = ["Lily", "Tom", "Mia", "Ben", "Sara", "Max", "Anna", "Sam", "Lucy", "Tim",
         "Zoe", "Jack", "Emma", "Leo", "Nora", "Finn", "Ruby", "Owen", "Ivy", "Noah"]
ANIMALS = ["cat", "dog", "bird", "frog", "bunny", "duck", "fox", "bear", "mouse", "owl",
           "turtle", "puppy", "kitten", "lamb", "pony"]
OBJECTS = ["ball", "kite", "box", "hat", "cup", "book", "drum", "boat", "car", "doll",
           "shell", "stone", "flower", "leaf", "key", "spoon", "blanket", "lamp", "bell", "map"]
ADJECTIVES = ["red", "big", "small", "shiny", "soft", "old", "new", "blue", "green",
              "yellow", "happy", "funny", "tiny", "bright", "warm", "quiet", "fast", "round"]
PLACES = ["the park", "the garden", "the forest", "the beach", "the kitchen", "the farm",
          "the hill", "the river", "the school", "the market", "the yard", "the lake",
          "the library", "the zoo", "the meadow"]
FEELINGS = ["happy", "sad", "scared", "excited", "tired", "proud", "curious", "angry",
            "surprised", "calm", "shy", "brave"]
WEATHER = ["sunny", "rainy", "windy", "cold", "warm", "cloudy", "snowy"]
VERBS_PAST = ["played", "jumped", "ran", "laughed", "sang", "danced", "walked", "looked around",
              "sat down", "waited", "smiled", "shouted"]
ACTIONS = ["find a {obj}", "build a tower", "climb a tree", "bake a cake", "draw a picture",
           "look for the {obj}", "help the {animal}", "fix the {obj}", "share the {obj}",
           "go to {place}", "catch the {obj}", "plant a seed", "read a book"]
MORALS = ["sharing is good", "it is good to be kind", "friends help each other",
          "you should always tell the truth", "being brave is important",
          "it is okay to ask for help", "patience is a good thing",
          "every day can be an adventure"]
OPENINGS = ["Once upon a time, ", "One day, ", "Long ago, ", "One {weather} morning, ",
            "Every day, ", "Last summer, ", "On a {weather} day, "]


def pick(rng: random.Random, items):
    return items[rng.randrange(len(items))]


def fill(rng: random.Random, text: str) -> str:
    return text.format(obj=pick(rng, OBJECTS), animal=pick(rng, ANIMALS),
                       place=pick(rng, PLACES), weather=pick(rng, WEATHER))


def story(rng: random.Random) -> str:
    hero = pick(rng, NAMES)
    friend = pick(rng, [n for n in NAMES if n != hero])
    pet = pick(rng, ANIMALS)
    obj = pick(rng, OBJECTS)
    adj = pick(rng, ADJECTIVES)
    place = pick(rng, PLACES)
    pronoun = rng.choice(["he", "she", "they"])
    poss = {"he": "his", "she": "her", "they": "their"}[pronoun]
    cap = pronoun.capitalize()
    be = "was" if pronoun != "they" else "were"
    s = []
    s.append(fill(rng, pick(rng, OPENINGS)) + f"there was a little child named {hero}.")
    s.append(f"{hero} had a {adj} {obj} and a {pick(rng, ADJECTIVES)} {pet}.")
    s.append(f"{cap} liked to go to {place} with {poss} {pet}.")
    for _ in range(rng.randint(2, 6)):
        kind = rng.randrange(7)
        if kind == 0:
            s.append(f"One day, {hero} wanted to {fill(rng, pick(rng, ACTIONS))}.")
        elif kind == 1:
            s.append(f"{hero} met {friend} at {pick(rng, PLACES)}.")
            s.append(f'"Hello, {friend}!" said {hero}. "Do you want to play with me?"')
            s.append(f'"Yes, I do!" said {friend}.')
        elif kind == 2:
            s.append(f"The {pet} {pick(rng, VERBS_PAST)} and {hero} {pick(rng, VERBS_PAST)} too.")
        elif kind == 3:
            lost = pick(rng, OBJECTS)
            s.append(f"But then {hero} could not find the {lost}.")
            s.append(f"{cap} {be} very {pick(rng, ['sad', 'worried', 'scared'])}.")
            s.append(f"{hero} looked under the bed, behind the door and in {pick(rng, PLACES)}.")
            s.append(f"At last, the {pet} found the {lost} and {hero} was {pick(rng, FEELINGS)} again.")
        elif kind == 4:
            s.append(f"The sky was {pick(rng, WEATHER)} and the wind made the {pick(rng, OBJECTS)} move.")
        elif kind == 5:
            s.append(f"{hero} and {friend} decided to {fill(rng, pick(rng, ACTIONS))} together.")
            s.append(f"It was hard, but they did not give up.")
        else:
            n = rng.randint(2, 9)
            s.append(f"{hero} counted {n} {pick(rng, ADJECTIVES)} {pick(rng, OBJECTS)}s "
                     f"and gave {rng.randint(1, n)} to {friend}.")
    s.append(f"At the end of the day, {hero} felt {pick(rng, FEELINGS)}.")
    if rng.random() < 0.6:
        s.append(f"{cap} learned that {pick(rng, MORALS)}.")
    s.append("The end.")
    return " ".join(s)


def generate(target_bytes: int, seed: int) -> str:
    rng = random.Random(seed)
    parts, size = [], 0
    while size < target_bytes:
        text = story(rng) + "\n\n"
        parts.append(text)
        size += len(text.encode("utf-8"))
    return "".join(parts)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bytes", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", type=Path,
                    default=Path(__file__).resolve().parents[1] / "src/moegap/corpus/tinytales.txt")
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(generate(args.bytes, args.seed), encoding="utf-8")
    print(f"wrote {args.out} ({args.out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
