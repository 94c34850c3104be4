"""Word pools and description templates for the synthetic car-listing task."""

COLORS = ("red", "green", "blue", "black", "white", "silver", "yellow", "orange", "purple", "brown")

CITIES = ("Sydney", "Berlin", "Paris", "Tokyo", "Madrid", "Rome", "Oslo", "Lima", "Dublin", "Vienna")

# model -> make
MODELS = {
    "Cullinan": "Rolls-Royce",
    "Phantom": "Rolls-Royce",
    "Corolla": "Toyota",
    "Camry": "Toyota",
    "Mustang": "Ford",
    "Civic": "Honda",
    "Accord": "Honda",
    "Golf": "Volkswagen",
    "Passat": "Volkswagen",
    "Huracan": "Lamborghini",
}

ENGINES = ("6.75L Twin-Turbo V12", "2.0L I4", "5.0L V8", "1.5L Turbo I4", "3.0L V6", "5.2L V10")
DRIVETRAINS = ("RWD", "AWD", "FWD")
INTERIORS = ("Cognac Nappa leather", "Alcantara", "cloth", "vegan leather", "Merino leather")
EXTRAS = ("panoramic roof", "rear entertainment", "premium audio", "heated seats", "adaptive cruise")

DESCRIPTION_TEMPLATES = (
    "Performance enthusiast's dream: {color} {make} {model} ({year}). Unleash {hp} HP from the {engine}, "
    "reaching {top_speed} km/h. {drivetrain}, {interior}, {extra}. Located in {city}, {mileage} km, "
    "VIN: {vin}. Priced at ${price}.",
    "For sale in {city}: {year} {make} {model} in {color}. {engine} with {hp} HP, top speed {top_speed} km/h, "
    "{drivetrain}. {interior}, {extra}, {mileage} km. VIN {vin}, asking ${price}.",
    "{model} by {make}, finished in {color}, {year}. {drivetrain} with a {engine} making {hp} HP and "
    "{top_speed} km/h. {mileage} km on the clock, {interior}, {extra}. Now in {city}. VIN: {vin}. ${price}.",
)

VIN_ALPHABET = "ABCDEFGHJKLMNPRSTUVWXYZ0123456789"
